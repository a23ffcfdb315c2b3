"""
Versioned text serialization for cascade and classifier models

Every real is written with 9 significant digits. Models quantize their
parameters to that precision when they are built, so save then load gives
back the identical floats.
"""
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Tuple, Union

import numpy as np

from services.box_regressor import BoxRegressor
from services.crop_classifier import ClassifierModel
from services.regionlet_detector import (
    FEATURE_POOL, CascadeModel, CascadeStage, RegionletSpec, WeakClassifier,
)
from utils.errors import GeometryError, ModelFormatError

logger = logging.getLogger(__name__)

CASCADE_MAGIC = "OCSCASCADE"
CLASSIFIER_MAGIC = "OCSCLS"
VERSION = "v1"


def fmt(value: float) -> str:
    return f"{float(value):.9g}"


def _lines(text: str) -> List[str]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _float(text: str, line_number: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise ModelFormatError(f"line {line_number}: not a number: {text!r}") from None


def _int(text: str, line_number: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ModelFormatError(f"line {line_number}: not an integer: {text!r}") from None


def _write(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


# cascade

def format_cascade(model: CascadeModel) -> str:
    out = [f"{CASCADE_MAGIC} {VERSION}", "features\t" + ",".join(model.feature_pool)]
    for key in sorted(model.metadata):
        value = model.metadata[key]
        if any(c in f"{key}{value}" for c in "\t\n"):
            raise ModelFormatError(f"metadata {key!r} contains a tab or newline")
        out.append(f"meta\t{key}\t{value}")
    out.append(f"stages\t{len(model.stages)}")
    for index, stage in enumerate(model.stages):
        out.append(f"stage\t{index}\t{len(stage.weak)}\t{fmt(stage.rejection_threshold)}")
        for weak in stage.weak:
            fields = ["weak", str(index), fmt(weak.threshold), fmt(weak.alpha_plus), fmt(weak.alpha_minus),
                      str(len(weak.regionlets))]
            for r in weak.regionlets:
                fields.append(" ".join([fmt(r.rx0), fmt(r.ry0), fmt(r.rx1), fmt(r.ry1),
                                        str(r.feature_id), str(r.channel)]))
            out.append("\t".join(fields))
    if model.regressor is not None:
        out.append(f"regressor\t{model.regressor.dim}\t{model.regressor.ridge_lambda!r}")
        for row in model.regressor.weights:
            out.append("row\t" + " ".join(fmt(v) for v in row))
    out.append("end")
    return "\n".join(out) + "\n"


def _parse_regionlet(text: str, line_number: int) -> RegionletSpec:
    parts = text.split(" ")
    if len(parts) != 6:
        raise ModelFormatError(f"line {line_number}: regionlet needs 6 values, got {len(parts)}")
    coords = [_float(p, line_number) for p in parts[:4]]
    try:
        return RegionletSpec(*coords, _int(parts[4], line_number), _int(parts[5], line_number))
    except GeometryError as e:
        raise ModelFormatError(f"line {line_number}: {e}") from e


def parse_cascade(text: str) -> CascadeModel:
    lines = list(enumerate(_lines(text), start=1))
    if not lines or lines[0][1] != f"{CASCADE_MAGIC} {VERSION}":
        raise ModelFormatError(f"expected '{CASCADE_MAGIC} {VERSION}' header")
    it: Iterator[Tuple[int, str]] = iter(lines[1:])

    def next_fields(tag: str) -> Tuple[int, List[str]]:
        try:
            number, line = next(it)
        except StopIteration:
            raise ModelFormatError(f"unexpected end of file, expected {tag!r}") from None
        fields = line.split("\t")
        if fields[0] != tag:
            raise ModelFormatError(f"line {number}: expected {tag!r}, got {fields[0]!r}")
        return number, fields

    number, fields = next_fields("features")
    pool = tuple(fields[1].split(",")) if len(fields) == 2 else ()
    if pool != FEATURE_POOL:
        raise ModelFormatError(f"line {number}: feature pool {pool} does not match {FEATURE_POOL}")

    metadata: Dict[str, str] = {}
    number, line = next(it, (None, None))
    while line is not None and line.startswith("meta\t"):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ModelFormatError(f"line {number}: meta needs key and value")
        metadata[fields[1]] = fields[2]
        number, line = next(it, (None, None))
    if line is None or not line.startswith("stages\t"):
        raise ModelFormatError(f"line {number}: expected 'stages'")
    num_stages = _int(line.split("\t")[1], number)

    stages = []
    for expected in range(num_stages):
        number, fields = next_fields("stage")
        if len(fields) != 4 or _int(fields[1], number) != expected:
            raise ModelFormatError(f"line {number}: malformed stage header")
        weak_list = []
        for _ in range(_int(fields[2], number)):
            wnum, wf = next_fields("weak")
            if len(wf) < 6 or len(wf) != 6 + _int(wf[5], wnum):
                raise ModelFormatError(f"line {wnum}: regionlet count does not match the line")
            if _int(wf[1], wnum) != expected:
                raise ModelFormatError(f"line {wnum}: weak classifier filed under stage {wf[1]}, expected {expected}")
            regionlets = tuple(_parse_regionlet(t, wnum) for t in wf[6:])
            try:
                weak_list.append(WeakClassifier(regionlets, _float(wf[2], wnum),
                                                _float(wf[3], wnum), _float(wf[4], wnum)))
            except GeometryError as e:
                raise ModelFormatError(f"line {wnum}: {e}") from e
        stages.append(CascadeStage(tuple(weak_list), _float(fields[3], number)))

    regressor = None
    number, line = next(it, (None, None))
    if line is not None and line.startswith("regressor\t"):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ModelFormatError(f"line {number}: malformed regressor header")
        dim, ridge = _int(fields[1], number), _float(fields[2], number)
        rows = []
        for _ in range(dim):
            rnum, rf = next_fields("row")
            values = rf[1].split(" ") if len(rf) == 2 else []
            if len(values) != 4:
                raise ModelFormatError(f"line {rnum}: regressor row needs 4 values")
            rows.append([_float(v, rnum) for v in values])
        regressor = BoxRegressor(np.array(rows, dtype=np.float64).reshape(dim, 4), ridge)
        number, line = next(it, (None, None))
    if line != "end":
        raise ModelFormatError(f"line {number}: expected 'end'")
    if next(it, None) is not None:
        raise ModelFormatError("trailing content after 'end'")
    return CascadeModel(stages=tuple(stages), metadata=metadata, regressor=regressor)


def save_cascade(model: CascadeModel, path: Union[str, Path]) -> None:
    _write(path, format_cascade(model))
    logger.info(f"💾 saved cascade with {len(model.stages)} stages / {model.num_weak} weak classifiers to {path}")


def load_cascade(path: Union[str, Path]) -> CascadeModel:
    model = parse_cascade(Path(path).read_text(encoding="utf-8"))
    logger.info(f"📂 loaded cascade {path}: {len(model.stages)} stages, {model.num_weak} weak classifiers")
    return model


# classifier

def format_classifier(model: ClassifierModel) -> str:
    out = [f"{CLASSIFIER_MAGIC} {VERSION} {model.num_classes} {model.dims}"]
    out.extend(" ".join(fmt(v) for v in row) for row in model.weights)
    return "\n".join(out) + "\n"


def parse_classifier(text: str) -> ClassifierModel:
    lines = _lines(text)
    header = lines[0].split(" ") if lines else []
    if len(header) != 4 or header[0] != CLASSIFIER_MAGIC or header[1] != VERSION:
        raise ModelFormatError(f"expected '{CLASSIFIER_MAGIC} {VERSION} <classes> <dims>' header")
    classes, dims = _int(header[2], 1), _int(header[3], 1)
    if classes < 1 or dims < 1:
        raise ModelFormatError("line 1: classes and dims must be >= 1")
    if len(lines) != classes + 1:
        raise ModelFormatError(f"expected {classes} weight rows, got {len(lines) - 1}")
    rows = []
    for number, line in enumerate(lines[1:], start=2):
        values = line.split(" ")
        if len(values) != dims + 1:
            raise ModelFormatError(f"line {number}: expected {dims + 1} weights, got {len(values)}")
        rows.append([_float(v, number) for v in values])
    return ClassifierModel(np.array(rows, dtype=np.float64))


def save_classifier(model: ClassifierModel, path: Union[str, Path]) -> None:
    _write(path, format_classifier(model))
    logger.info(f"💾 saved {model.num_classes}-class classifier to {path}")


def load_classifier(path: Union[str, Path]) -> ClassifierModel:
    return parse_classifier(Path(path).read_text(encoding="utf-8"))
