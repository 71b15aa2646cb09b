"""Block prediction, counting, traffic density and count metrics."""
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigError, ShapeMismatchError
from app.models import EvalResult, FeatureMatrix, Roi, WeightMatrix

logger = logging.getLogger(__name__)


def predict_blocks(W: WeightMatrix, X: FeatureMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """Return (clamped, raw) block densities; clamped = max(0, w_j . x_j)."""
    if (W.K, W.J) != (X.K, X.J):
        raise ShapeMismatchError(
            f"weights are (K={W.K}, J={W.J}) but features are (J={X.J}, K={X.K})"
        )
    raw = np.einsum("jk,kj->j", X.data, W.data)
    return np.maximum(raw, 0.0), raw


def predict_dataset(W: WeightMatrix, stack: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Clamped and raw predictions for a (N, J, K) feature stack."""
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1:] != (W.J, W.K):
        raise ShapeMismatchError(
            f"feature stack {stack.shape} does not match weights (K={W.K}, J={W.J})"
        )
    raw = np.einsum("ijk,kj->ij", stack, W.data)
    return np.maximum(raw, 0.0), raw


def count_from_blocks(block_densities) -> float:
    return float(np.sum(block_densities))


def traffic_density(count: float, roi: Roi) -> float:
    """Vehicles per unit length of road."""
    if roi.region_length <= 0:
        raise ConfigError("region_length must be positive")
    return count / roi.region_length


def count_frames(
    frame_ids: Sequence[str],
    W: WeightMatrix,
    stack: np.ndarray,
    roi: Roi,
) -> List[Tuple[str, float, float, float]]:
    """Per-frame (frame_id, raw count, clamped count, traffic density)."""
    clamped, raw = predict_dataset(W, stack)
    rows = []
    for fid, clamped_row, raw_row in zip(frame_ids, clamped, raw):
        count = count_from_blocks(clamped_row)
        raw_count = count_from_blocks(raw_row)
        logger.debug(f"frame {fid}: raw count {raw_count:.4f}, clamped count {count:.4f}")
        rows.append((fid, raw_count, count, traffic_density(count, roi)))
    return rows


def evaluate(true_counts, est_counts, frame_ids: Sequence[str] = ()) -> EvalResult:
    """
    MAE, MSE and average relative accuracy.

    ARA = 1 - mean(|e_i| / max(c_i, 1)) with e_i = est_i - true_i; the
    max(c_i, 1) guard keeps zero-vehicle frames finite.
    """
    true_counts = np.asarray(true_counts, dtype=np.float64)
    est_counts = np.asarray(est_counts, dtype=np.float64)
    if true_counts.shape != est_counts.shape or true_counts.ndim != 1:
        raise ShapeMismatchError(
            f"count vectors differ: {true_counts.shape} vs {est_counts.shape}"
        )
    if true_counts.size == 0:
        raise ValueError("cannot evaluate an empty set of frames")
    ids = list(frame_ids) or [str(i) for i in range(true_counts.size)]
    if len(ids) != true_counts.size:
        raise ShapeMismatchError("frame_ids must have one entry per frame")

    n = true_counts.size
    errors = est_counts - true_counts
    abs_err = np.abs(errors)
    relative = abs_err / np.maximum(true_counts, 1.0)
    # fsum is exactly rounded, so the metrics do not depend on frame order
    return EvalResult(
        mae=math.fsum(abs_err) / n,
        mse=math.fsum(errors**2) / n,
        ara=1.0 - math.fsum(relative) / n,
        per_frame=tuple(
            (fid, float(c), float(e)) for fid, c, e in zip(ids, true_counts, est_counts)
        ),
    )
