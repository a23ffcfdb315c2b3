"""
Ridge-regression box re-localization

Maps window features to (dx, dy, dlog w, dlog h) offsets expressed in the
detected box's own normalized coordinates.
"""
import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from services.geometry import Rect
from utils.errors import RegressionError

logger = logging.getLogger(__name__)

OFFSET_NAMES = ("dx", "dy", "dlogw", "dlogh")


@dataclass(frozen=True)
class RegressionPair:
    detected: Rect
    truth: Rect
    features: np.ndarray


@dataclass(frozen=True, eq=False)
class BoxRegressor:
    weights: np.ndarray          # (dim, 4)
    ridge_lambda: float

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def predict_offsets(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights


def quantize(value: float) -> float:
    """Round to 9 significant digits so text serialization is lossless"""
    return float(f"{value:.9g}")


def box_offsets(detected: Rect, truth: Rect) -> np.ndarray:
    dcx, dcy = detected.center
    tcx, tcy = truth.center
    return np.array([
        (tcx - dcx) / detected.width,
        (tcy - dcy) / detected.height,
        np.log(truth.width / detected.width),
        np.log(truth.height / detected.height),
    ])


def fit_box_regressor(pairs: Sequence[RegressionPair], ridge_lambda: float) -> BoxRegressor:
    if ridge_lambda < 0:
        raise RegressionError(f"ridge lambda must be >= 0, got {ridge_lambda}")
    if not pairs:
        raise RegressionError("no regression pairs")
    X = np.stack([np.asarray(p.features, dtype=np.float64) for p in pairs])
    dim = X.shape[1]
    if len(pairs) < dim + 1:
        raise RegressionError(f"need at least {dim + 1} pairs for {dim} features, got {len(pairs)}")
    T = np.stack([box_offsets(p.detected, p.truth) for p in pairs])

    gram = X.T @ X + ridge_lambda * np.eye(dim)
    if ridge_lambda == 0 and np.linalg.matrix_rank(gram) < dim:
        raise RegressionError("singular regression system at lambda=0")
    try:
        W = np.linalg.solve(gram, X.T @ T)
    except np.linalg.LinAlgError as e:
        raise RegressionError(f"regression solve failed: {e}") from e

    W = np.vectorize(quantize, otypes=[np.float64])(W)
    residual = float(np.sqrt(np.mean((X @ W - T) ** 2)))
    logger.info(f"📐 box regressor fitted on {len(pairs)} pairs, rms offset residual {residual:.4f}")
    return BoxRegressor(weights=W.astype(np.float64), ridge_lambda=ridge_lambda)


def _round_half_up(v: float) -> int:
    return int(np.floor(v + 0.5))


def apply_offsets(rect: Rect, offsets: Sequence[float], image_size: Tuple[int, int]) -> Rect:
    width, height = image_size
    dx, dy, dlw, dlh = (float(v) for v in offsets)
    cx, cy = rect.center
    cx += dx * rect.width
    cy += dy * rect.height
    # exp overflow guard for absurd offsets; the result is clipped anyway
    w = rect.width * float(np.exp(np.clip(dlw, -20.0, 20.0)))
    h = rect.height * float(np.exp(np.clip(dlh, -20.0, 20.0)))

    x0 = min(max(_round_half_up(cx - w / 2.0), 0), width - 1)
    y0 = min(max(_round_half_up(cy - h / 2.0), 0), height - 1)
    x1 = min(max(_round_half_up(cx + w / 2.0), x0 + 1), width)
    y1 = min(max(_round_half_up(cy + h / 2.0), y0 + 1), height)
    return Rect(x0, y0, x1, y1)


def apply_box_regressor(regressor: BoxRegressor, detection, features: np.ndarray,
                        image_size: Tuple[int, int]) -> Rect:
    """Refined rect for a Detection, clipped to the image"""
    return apply_offsets(detection.rect, regressor.predict_offsets(features), image_size)
