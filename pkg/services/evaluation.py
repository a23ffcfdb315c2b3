"""
Detection AP, score-vs-size analysis and the sampling benchmark table
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from services.geometry import Rect, iou
from services.regionlet_detector import Detection
from utils.errors import BenchmarkMismatchError, ConfigurationError

logger = logging.getLogger(__name__)

APMode = Literal["11-point", "every-point"]
BinMode = Literal["quantile", "equal-width"]

# full-scale figures reported for the real car dataset; printed, never computed
REFERENCE_ACCURACY = {"Uniform": (81.6, 92.8), "Multinomial": (89.3, 96.6)}
REFERENCE_DETECTION_AP = 85.8
REFERENCE_CASCADE_SHAPE = "8 stages, ~1e4 weak classifiers"

ImageDetections = Union[None, Detection, Sequence[Detection]]


@dataclass(frozen=True)
class SizeBin:
    lo_area: int
    hi_area: int
    count: int
    mean_score: Optional[float]


@dataclass(frozen=True)
class EvalResult:
    metric: str
    value: float
    support: int
    bins: Tuple[SizeBin, ...] = ()
    extra: Dict[str, float] = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class ClassificationResult:
    method: str
    top1: float
    top5: float
    test_set: Tuple[str, ...]
    top1_sd: float = 0.0
    top5_sd: float = 0.0
    runs: int = 1


def _as_list(dets: ImageDetections) -> List[Detection]:
    if dets is None:
        return []
    if isinstance(dets, Detection):
        return [dets]
    return list(dets)


def match_detections(detections: Sequence[ImageDetections], gts: Sequence[Rect],
                     iou_threshold: float = 0.80) -> Tuple[np.ndarray, np.ndarray]:
    """Scores and true-positive flags of every detection, sorted by score then image index"""
    if len(detections) != len(gts):
        raise ConfigurationError(f"{len(detections)} detection lists for {len(gts)} ground truths")
    pooled = [(det.score, image, k, det.rect)
              for image, dets in enumerate(detections)
              for k, det in enumerate(_as_list(dets))]
    pooled.sort(key=lambda p: (-p[0], p[1], p[2]))
    matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(pooled), dtype=bool)
    for i, (_, image, _, rect) in enumerate(pooled):
        if not matched[image] and iou(rect, gts[image]) >= iou_threshold:
            matched[image] = True
            tp[i] = True
    scores = np.array([p[0] for p in pooled], dtype=np.float64)
    return scores, tp


def average_precision(detections: Sequence[ImageDetections], gts: Sequence[Rect],
                      iou_threshold: float = 0.80, mode: APMode = "11-point") -> float:
    npos = len(gts)
    if npos == 0:
        raise ConfigurationError("average precision needs at least one ground truth")
    _, tp = match_detections(detections, gts, iou_threshold)
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp).astype(np.int64)
    fp_cum = np.cumsum(~tp).astype(np.int64)
    precision = tp_cum / (tp_cum + fp_cum)

    if mode == "11-point":
        total = 0.0
        for i in range(11):
            # recall >= i/10 without float rounding
            reached = tp_cum * 10 >= i * npos
            total += float(precision[reached].max()) if reached.any() else 0.0
        return total / 11.0

    recall = np.concatenate([[0.0], tp_cum / npos, [1.0]])
    envelope = np.concatenate([[0.0], precision, [0.0]])
    envelope = np.maximum.accumulate(envelope[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(np.sum((recall[steps + 1] - recall[steps]) * envelope[steps + 1]))


def _bin_members(areas: np.ndarray, bins: int, mode: BinMode) -> List[np.ndarray]:
    if mode == "quantile":
        order = np.lexsort((np.arange(areas.size), areas))
        return np.array_split(order, bins)
    lo, hi = areas.min(), areas.max()
    if hi == lo:
        index = np.zeros(areas.size, dtype=np.int64)
    else:
        index = np.minimum(((areas - lo) * bins // (hi - lo)).astype(np.int64), bins - 1)
    return [np.flatnonzero(index == b) for b in range(bins)]


def score_vs_size_curve(detections: Sequence[Optional[Detection]], gts: Sequence[Rect],
                        bins: int = 5, mode: BinMode = "quantile") -> EvalResult:
    """Mean detection score per ground-truth area bin; empty bins carry no mean"""
    if bins < 1:
        raise ConfigurationError(f"bins must be >= 1, got {bins}")
    if len(detections) != len(gts):
        raise ConfigurationError(f"{len(detections)} detections for {len(gts)} ground truths")
    present = [i for i, d in enumerate(detections) if d is not None]
    if not present:
        return EvalResult("score_vs_size", float("nan"), 0,
                          tuple(SizeBin(0, 0, 0, None) for _ in range(bins)))
    areas = np.array([gts[i].area for i in present], dtype=np.int64)
    scores = np.array([detections[i].score for i in present], dtype=np.float64)

    result = []
    for members in _bin_members(areas, bins, mode):
        if members.size == 0:
            result.append(SizeBin(0, 0, 0, None))
            continue
        result.append(SizeBin(int(areas[members].min()), int(areas[members].max()),
                              int(members.size), float(scores[members].mean())))
    rho = spearman_of_bins(result)
    return EvalResult("score_vs_size", rho, len(present), tuple(result))


def spearman_of_bins(bins: Sequence[SizeBin]) -> float:
    """Rank correlation of bin index against mean score over non-empty bins, nan if undefined"""
    filled = [(i, b.mean_score) for i, b in enumerate(bins) if b.mean_score is not None]
    if len(filled) < 2 or len({m for _, m in filled}) < 2:
        return float("nan")
    index, means = zip(*filled)
    rho, _ = stats.spearmanr(index, means)
    return float(rho)


def benchmark_table(uniform: ClassificationResult, multinomial: ClassificationResult,
                    extra: Sequence[ClassificationResult] = ()) -> str:
    """Tab-separated accuracy table with a Multinomial - Uniform delta row"""
    for other in (multinomial, *extra):
        if other.test_set != uniform.test_set:
            raise BenchmarkMismatchError(
                f"{other.method} was evaluated on a different test set than {uniform.method}")
    lines = ["# reference (full scale, %): " + "; ".join(
        f"{name} top1 {t1} top5 {t5}" for name, (t1, t5) in REFERENCE_ACCURACY.items())]
    lines.append("method\ttop1\ttop5\ttop1_sd\ttop5_sd\truns")
    for row in (uniform, multinomial, *extra):
        lines.append(f"{row.method}\t{float(row.top1)!r}\t{float(row.top5)!r}\t{float(row.top1_sd)!r}\t{float(row.top5_sd)!r}\t{row.runs}")
    lines.append(f"Delta\t{float(multinomial.top1 - uniform.top1)!r}\t{float(multinomial.top5 - uniform.top5)!r}\t-\t-\t-")
    return "\n".join(lines) + "\n"


def parse_benchmark_table(text: str) -> Dict[str, Dict[str, Optional[float]]]:
    rows: Dict[str, Dict[str, Optional[float]]] = {}
    header: Optional[List[str]] = None
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if header is None:
            header = fields[1:]
            continue
        if len(fields) != len(header) + 1:
            raise ConfigurationError(f"benchmark row {fields[0]!r} has {len(fields) - 1} values")
        rows[fields[0]] = {name: (None if v == "-" else float(v)) for name, v in zip(header, fields[1:])}
    return rows


def format_report(items: Iterable[Tuple[str, object]], comments: Sequence[str] = ()) -> str:
    """key<TAB>value lines in the given order, floats in round-trip form"""
    lines = [f"# {c}" for c in comments]
    for key, value in items:
        text = repr(float(value)) if isinstance(value, float) else str(value)
        lines.append(f"{key}\t{text}")
    return "\n".join(lines) + "\n"


def detection_report(detections: Sequence[Optional[Detection]], gts: Sequence[Rect],
                     iou_threshold: float = 0.80, ap_mode: APMode = "11-point",
                     bins: int = 5, bin_mode: BinMode = "quantile") -> str:
    ap = average_precision(detections, gts, iou_threshold, ap_mode)
    ap80 = ap if iou_threshold == 0.80 else average_precision(detections, gts, 0.80, ap_mode)
    curve = score_vs_size_curve(detections, gts, bins, bin_mode)
    items: List[Tuple[str, object]] = [
        ("images", len(gts)),
        ("detections", sum(d is not None for d in detections)),
        ("ap_mode", ap_mode),
        ("ap@0.8", ap80),
        (f"ap@{iou_threshold!r}", ap),
        ("size_bins", bins),
        ("size_bin_mode", bin_mode),
    ]
    for i, b in enumerate(curve.bins):
        mean = "absent" if b.mean_score is None else repr(b.mean_score)
        items.append((f"bin{i}", f"{b.lo_area}-{b.hi_area} n={b.count} mean={mean}"))
    items.append(("spearman_rho", curve.value))
    logger.info(f"📊 AP@{iou_threshold} = {ap:.4f} over {len(gts)} images, size-score rho {curve.value:.3f}")
    return format_report(items, comments=[f"reference full-scale detection AP@0.8: {REFERENCE_DETECTION_AP}%",
                                           f"reference full-scale cascade: {REFERENCE_CASCADE_SHAPE}"])
