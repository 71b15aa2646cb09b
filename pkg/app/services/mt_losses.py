"""Multi-task density/count loss kernels with analytic gradients."""
from typing import Sequence, Tuple

import numpy as np

from app.config import settings
from app.exceptions import ConfigError, ShapeMismatchError
from app.models import CountPrediction, DensityMap


def density_loss(pred_maps, gt_maps) -> Tuple[float, np.ndarray]:
    """
    Pixel-wise squared density error averaged over the batch.

    loss = (1/2N) sum_i sum_p (pred_i(p) - gt_i(p))^2
    grad = (1/N) (pred - gt), same shape as the predictions
    """
    pred = np.asarray(pred_maps, dtype=np.float64)
    gt = np.asarray(gt_maps, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    if pred.ndim < 1 or pred.shape[0] == 0:
        raise ShapeMismatchError("density loss needs a non-empty batch")
    n = pred.shape[0]
    diff = pred - gt
    return 0.5 * float(np.sum(diff**2)) / n, diff / n


def residual_count(density: DensityMap, offset: float) -> CountPrediction:
    """Count = integral of the density map + a learned offset."""
    return CountPrediction(base_count=density.total(), offset=float(offset))


def huber_count_loss(est: float, true: float, delta: float = settings.huber_delta) -> Tuple[float, float]:
    """Huber loss on the count error e = est - true, and its derivative in est."""
    if delta <= 0:
        raise ConfigError(f"Huber threshold must be positive, got {delta}")
    e = float(est) - float(true)
    if abs(e) <= delta:
        return 0.5 * e * e, e
    return delta * abs(e) - 0.5 * delta * delta, float(np.copysign(delta, e))


def count_loss_batch(est, true, delta: float = settings.huber_delta) -> Tuple[np.ndarray, np.ndarray]:
    """Per-frame Huber losses and derivatives."""
    if delta <= 0:
        raise ConfigError(f"Huber threshold must be positive, got {delta}")
    est = np.asarray(est, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if est.shape != true.shape:
        raise ShapeMismatchError(f"estimates {est.shape} vs targets {true.shape}")
    e = est - true
    quadratic = np.abs(e) <= delta
    loss = np.where(quadratic, 0.5 * e * e, delta * np.abs(e) - 0.5 * delta * delta)
    grad = np.where(quadratic, e, np.copysign(delta, e))
    return loss, grad


def total_loss(density_term: float, count_terms: Sequence[float],
               lam: float = settings.count_loss_weight) -> float:
    """L = L_D + lambda * mean(count losses)."""
    if lam < 0:
        raise ConfigError(f"count loss weight must be non-negative, got {lam}")
    count_terms = np.asarray(count_terms, dtype=np.float64)
    if count_terms.size == 0:
        return float(density_term)
    return float(density_term) + lam * float(np.mean(count_terms))
