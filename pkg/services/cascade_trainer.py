"""
Cascade training: sample partitioning, discrete AdaBoost stages with random
regionlet candidate pools, hard negative mining between stages, and the
box regressor fitted on positive proposals.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from services.box_regressor import RegressionPair, fit_box_regressor, quantize
from services.geometry import ImageBuffer, Rect, intersection_over_reference, iou
from services.regionlet_detector import (
    FEATURE_LOG_AREA, CascadeModel, CascadeStage, DetectorConfig, FeatureAtlas, RegionletSpec,
    WeakClassifier, WindowBatch, generate_proposals, localization_features, prepare_features,
    random_regionlet_set, score_windows,
)
from utils.errors import ConfigurationError, RegressionError
from utils.progress import progress

logger = logging.getLogger(__name__)

_MIN_ERROR = 1e-10


@dataclass(frozen=True)
class TrainingImage:
    image: ImageBuffer
    ground_truth: Rect
    image_id: str = ""


@dataclass(frozen=True)
class SamplePartition:
    positives: Tuple[Rect, ...]
    negatives: Tuple[Rect, ...]
    discarded: Tuple[Rect, ...]


@dataclass(frozen=True)
class StumpFit:
    error: float
    threshold: float
    polarity: int       # +1: predicts positive above threshold


@dataclass
class BoostingResult:
    weak: List[WeakClassifier] = field(default_factory=list)
    weak_errors: List[float] = field(default_factory=list)
    training_errors: List[float] = field(default_factory=list)
    # exponential loss under the initial weights, the bound on training error
    exp_losses: List[float] = field(default_factory=list)
    weight_sums: List[float] = field(default_factory=list)
    scores: Optional[np.ndarray] = None


def partition_training_samples(proposals: Sequence[Rect], gt: Rect,
                               positive_overlap: float = 0.70,
                               negative_overlap: float = 0.30,
                               measure: str = "iou") -> SamplePartition:
    overlap = iou if measure == "iou" else intersection_over_reference
    positives, negatives, discarded = [], [], []
    for r in proposals:
        o = overlap(r, gt)
        if o > positive_overlap:
            positives.append(r)
        elif o < negative_overlap:
            negatives.append(r)
        else:
            discarded.append(r)
    return SamplePartition(tuple(positives), tuple(negatives), tuple(discarded))


def best_stump(values: np.ndarray, labels: np.ndarray, weights: np.ndarray,
               increasing: bool = False) -> StumpFit:
    """Exhaustive weighted-error stump search over one feature column

    increasing restricts the search to stumps that predict positive above the
    threshold; a fit worse than chance is then reported at chance level.
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    wp = np.where(labels[order] > 0, w, 0.0)
    wn = w - wp
    total_pos, total_neg = wp.sum(), wn.sum()

    # split after index i: "> threshold" predicts positive
    cwp = np.cumsum(wp)
    cwn = np.cumsum(wn)
    split_err = cwp + (total_neg - cwn)
    distinct = np.empty(v.size, dtype=bool)
    distinct[:-1] = v[1:] > v[:-1]
    distinct[-1] = True
    thresholds = np.empty(v.size, dtype=np.float64)
    thresholds[:-1] = (v[:-1] + v[1:]) / 2.0
    thresholds[-1] = v[-1]

    candidates_err = np.concatenate([[total_neg], split_err[distinct]])
    candidates_thr = np.concatenate([[v[0] - 1.0], thresholds[distinct]])
    total = total_pos + total_neg
    err_pos = candidates_err
    err_neg = total - candidates_err
    i_pos = int(np.argmin(err_pos))
    if increasing:
        return StumpFit(float(min(err_pos[i_pos], 0.5 * total)), float(candidates_thr[i_pos]), +1)
    i_neg = int(np.argmin(err_neg))
    if err_pos[i_pos] <= err_neg[i_neg]:
        return StumpFit(float(err_pos[i_pos]), float(candidates_thr[i_pos]), +1)
    return StumpFit(float(err_neg[i_neg]), float(candidates_thr[i_neg]), -1)


def _weak_from_stump(regionlets: Tuple[RegionletSpec, ...], fit: StumpFit) -> WeakClassifier:
    error = min(max(fit.error, _MIN_ERROR), 1.0 - _MIN_ERROR)
    alpha = quantize(0.5 * np.log((1.0 - error) / error))
    # a chance-level fit still needs alpha_plus != alpha_minus and its polarity
    if alpha <= 0.0:
        alpha = 1e-6
    threshold = quantize(fit.threshold)
    if fit.polarity > 0:
        return WeakClassifier(regionlets, threshold, alpha, -alpha)
    return WeakClassifier(regionlets, threshold, -alpha, alpha)


def adaboost(atlas: FeatureAtlas, batch: WindowBatch, labels: np.ndarray, rounds: int,
             candidate_source: Callable[[], Sequence[Tuple[RegionletSpec, ...]]],
             description: str = "boosting",
             increasing_features: FrozenSet[int] = frozenset()) -> BoostingResult:
    """Discrete AdaBoost with two-output stumps, balanced initial weights

    Stumps over a feature id in increasing_features may only reward larger values.
    """
    labels = np.asarray(labels)
    pos = labels > 0
    if not pos.any() or pos.all():
        raise ConfigurationError("boosting needs at least one positive and one negative sample")
    weights = np.where(pos, 0.5 / pos.sum(), 0.5 / (~pos).sum())
    initial = weights.copy()
    result = BoostingResult(scores=np.zeros(labels.size))

    for _ in progress(range(rounds), desc=description):
        candidates = candidate_source()
        best: Optional[Tuple[StumpFit, Tuple[RegionletSpec, ...]]] = None
        for regionlets in candidates:
            fit = best_stump(atlas.weak_values(regionlets, batch), labels, weights,
                             regionlets[0].feature_id in increasing_features)
            # strict comparison keeps the lowest candidate index on ties
            if best is None or fit.error < best[0].error:
                best = (fit, regionlets)
        fit, regionlets = best
        weak = _weak_from_stump(regionlets, fit)
        outputs = weak.output(atlas.weak_values(weak, batch))

        weights = weights * np.exp(-labels * outputs)
        weights = weights / weights.sum()
        result.scores = result.scores + outputs
        result.weak.append(weak)
        result.weak_errors.append(fit.error)
        result.training_errors.append(float(np.mean((result.scores > 0) != pos)))
        result.weight_sums.append(float(weights.sum()))
        result.exp_losses.append(float(np.sum(initial * np.exp(-labels * result.scores))))
    return result


def _quantize_down(value: float, limit: float) -> float:
    q = quantize(value)
    while q > limit:
        q = quantize(q - max(abs(q) * 1e-8, 1e-300))
    return q


def stage_threshold(positive_scores: np.ndarray, margin: float) -> float:
    """margin x the minimum positive running score, moved away from the positives when negative"""
    lowest = float(positive_scores.min())
    return _quantize_down(lowest - (1.0 - margin) * abs(lowest), lowest)


def _choose(rng: np.random.Generator, indices: np.ndarray, cap: int) -> np.ndarray:
    if indices.size <= cap:
        return indices
    return np.sort(rng.choice(indices, size=cap, replace=False))


def mine_hard_negatives(model: CascadeModel, atlas: FeatureAtlas, pool: WindowBatch,
                        cap: int, rng: np.random.Generator) -> np.ndarray:
    """Indices into pool of negatives the cascade still accepts (hardest ones when none do)"""
    scores, rejected = score_windows(model, atlas, pool, early_reject=True)
    survivors = np.flatnonzero(rejected < 0)
    if survivors.size:
        return _choose(rng, survivors, cap)
    passed = np.where(rejected < 0, len(model.stages), rejected)
    order = np.lexsort((np.arange(scores.size), -scores, -passed))
    return np.sort(order[:cap])


def _collect_windows(images: Sequence[TrainingImage], cfg: DetectorConfig):
    positives, negatives = [], []
    for index, item in enumerate(images):
        proposals = generate_proposals(item.image, cfg)
        part = partition_training_samples(proposals, item.ground_truth, cfg.positive_overlap,
                                          cfg.negative_overlap, cfg.partition_measure)
        pos_rects = [item.ground_truth] + [r for r in part.positives if r != item.ground_truth]
        positives.append(WindowBatch.from_rects(pos_rects, index))
        if part.negatives:
            negatives.append(WindowBatch.from_rects(part.negatives, index))
    return WindowBatch.concat(positives), WindowBatch.concat(negatives)


def _regression_pairs(images: Sequence[TrainingImage], atlas: FeatureAtlas,
                      positives: WindowBatch, cfg: DetectorConfig) -> List[RegressionPair]:
    pairs = []
    texture, texture_index = None, -1
    for i in progress(range(len(positives)), desc="regression pairs"):
        index = int(positives.image_index[i])
        rect = positives.rect(i)
        truth = images[index].ground_truth
        if rect == truth:
            continue
        # positives are grouped by image
        if index != texture_index:
            texture, texture_index = atlas.texture_table(index), index
        pairs.append(RegressionPair(rect, truth, localization_features(texture, rect, cfg)))
    return pairs


def train_cascade(images: Sequence[TrainingImage], cfg: DetectorConfig,
                  rng: Optional[np.random.Generator] = None) -> CascadeModel:
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    if not images:
        raise ConfigurationError("no training images")
    logger.info(f"🔄 preparing features for {len(images)} training images")
    atlas = FeatureAtlas([prepare_features(item.image) for item in progress(images, desc="features")])
    positives, pool = _collect_windows(images, cfg)
    if len(positives) == 0 or len(pool) == 0:
        raise ConfigurationError(
            f"cascade training needs positives and negatives, got {len(positives)}/{len(pool)}")
    logger.info(f"📦 {len(positives)} positive windows, {len(pool)} negative proposals")

    negatives = pool.subset(_choose(rng, np.arange(len(pool)), cfg.negatives_per_stage))
    stages: List[CascadeStage] = []
    stage_negatives, final_errors = [], []

    increasing = frozenset({FEATURE_LOG_AREA}) if cfg.monotone_scale else frozenset()

    def candidates():
        return [random_regionlet_set(rng, cfg) for _ in range(cfg.candidates_per_round)]

    for k in range(cfg.num_stages):
        batch = WindowBatch.concat([positives, negatives])
        labels = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
        boosted = adaboost(atlas, batch, labels, cfg.weak_per_stage, candidates,
                           description=f"stage {k + 1}/{cfg.num_stages}",
                           increasing_features=increasing)

        partial = CascadeModel(stages=tuple(stages) + (CascadeStage(tuple(boosted.weak), 0.0),))
        running, _ = score_windows(partial, atlas, positives, early_reject=False)
        threshold = stage_threshold(running, cfg.stage_margin)
        stages.append(CascadeStage(tuple(boosted.weak), threshold))
        stage_negatives.append(len(negatives))
        final_errors.append(boosted.training_errors[-1])
        logger.info(f"✅ cascade stage {k + 1} trained: {len(boosted.weak)} weak classifiers, "
                    f"training error {boosted.training_errors[-1]:.4f}, threshold {threshold:.6g}")

        if k + 1 < cfg.num_stages:
            model = CascadeModel(stages=tuple(stages))
            negatives = pool.subset(mine_hard_negatives(model, atlas, pool, cfg.negatives_per_stage, rng))
            logger.info(f"⛏️ hard negative mining kept {len(negatives)} windows for stage {k + 2}")

    regressor = None
    if cfg.use_regressor:
        pairs = _regression_pairs(images, atlas, positives, cfg)
        try:
            regressor = fit_box_regressor(pairs, cfg.ridge_lambda)
        except RegressionError as e:
            logger.warning(f"⚠️ box regressor skipped: {e}")

    metadata = {
        "seed": str(cfg.rng_seed),
        "images": str(len(images)),
        "positives": str(len(positives)),
        "negative_pool": str(len(pool)),
        "stage_negatives": ",".join(str(n) for n in stage_negatives),
        "stage_training_error": ",".join(f"{e:.6g}" for e in final_errors),
        "candidates_per_round": str(cfg.candidates_per_round),
        "partition_measure": cfg.partition_measure,
    }
    return CascadeModel(stages=tuple(stages), metadata=metadata, regressor=regressor)
