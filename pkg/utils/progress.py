"""
tqdm progress bars on stderr, switched off by --quiet or a non-TTY stderr
"""
import sys

from tqdm import tqdm

_enabled = True


def set_progress_enabled(enabled: bool) -> None:
    global _enabled
    _enabled = enabled


def progress(iterable=None, **kwargs):
    kwargs.setdefault("file", sys.stderr)
    kwargs.setdefault("leave", False)
    kwargs.setdefault("dynamic_ncols", True)
    # disable=None lets tqdm turn itself off when stderr is not a terminal
    return tqdm(iterable, disable=None if _enabled else True, **kwargs)
