"""Finite-difference checks of every analytic gradient in the package."""
import logging
from typing import Callable, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.config import settings
from app.models import TrainSet
from app.services import mt_losses, optimizer

logger = logging.getLogger(__name__)


class CheckResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    points: int
    worst_error: float
    passed: bool


class GradCheckReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    tol: float
    results: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> CheckResult:
        return max(self.results, key=lambda r: r.worst_error)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every entry of x."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + step
        upper = f(x)
        flat[i] = saved - step
        lower = f(x)
        flat[i] = saved
        gflat[i] = (upper - lower) / (2.0 * step)
    return grad


class GradientChecker:
    """Runs each suite at random points and records the worst relative error."""

    def __init__(self, step: float = settings.gradcheck_step,
                 points: int = settings.gradcheck_points):
        self.step = step
        self.points = points

    def _train_set(self, rng: np.random.Generator) -> TrainSet:
        n, j, k = 5, 4, 3
        return TrainSet(X=rng.uniform(0.0, 1.0, (n, j, k)), D=rng.uniform(0.0, 2.0, (n, j)))

    def check_subgradient(self, rng: np.random.Generator, beta: float) -> float:
        worst = 0.0
        for _ in range(self.points):
            train = self._train_set(rng)
            alpha = float(rng.uniform(0.0, 0.1))
            # entries bounded away from zero keep the L1 term differentiable
            W = rng.uniform(0.1, 1.0, (train.K, train.J)) * rng.choice([-1.0, 1.0], (train.K, train.J))
            analytic = optimizer.subgradient(W, train, alpha, beta)
            numeric = numeric_gradient(
                lambda w: optimizer.objective(w, train, alpha, beta), W, self.step)
            worst = max(worst, relative_error(analytic, numeric))
        return worst

    def check_density_loss(self, rng: np.random.Generator) -> float:
        worst = 0.0
        for _ in range(self.points):
            pred = rng.uniform(0.0, 0.2, (2, 3, 4))
            gt = rng.uniform(0.0, 0.2, (2, 3, 4))
            _, analytic = mt_losses.density_loss(pred, gt)
            numeric = numeric_gradient(lambda p: mt_losses.density_loss(p, gt)[0], pred, self.step)
            worst = max(worst, relative_error(analytic, numeric))
        return worst

    def check_huber(self, rng: np.random.Generator) -> float:
        worst = 0.0
        delta = settings.huber_delta
        for _ in range(self.points):
            true = float(rng.uniform(0.0, 30.0))
            e = float(rng.uniform(-3.0 * delta, 3.0 * delta))
            if abs(abs(e) - delta) < 100 * self.step:
                e += 200 * self.step
            est = true + e
            _, analytic = mt_losses.huber_count_loss(est, true, delta)
            numeric = numeric_gradient(
                lambda x: mt_losses.huber_count_loss(float(x[0]), true, delta)[0],
                np.array([est]), self.step)
            worst = max(worst, relative_error([analytic], numeric))
        return worst

    def check_count_batch(self, rng: np.random.Generator) -> float:
        worst = 0.0
        delta = settings.huber_delta
        for _ in range(self.points):
            true = rng.uniform(0.0, 30.0, 6)
            e = rng.uniform(-3.0 * delta, 3.0 * delta, 6)
            near_kink = np.abs(np.abs(e) - delta) < 100 * self.step
            e[near_kink] += 200 * self.step
            est = true + e
            _, analytic = mt_losses.count_loss_batch(est, true, delta)
            numeric = numeric_gradient(
                lambda x: float(np.sum(mt_losses.count_loss_batch(x, true, delta)[0])), est, self.step)
            worst = max(worst, relative_error(analytic, numeric))
        return worst

    def run(self, tol: Optional[float] = None, seed: int = 0) -> GradCheckReport:
        tol = settings.gradcheck_tol if tol is None else tol
        rng = np.random.default_rng(seed)
        suites = [
            ("optimizer.subgradient[beta=0]", lambda: self.check_subgradient(rng, 0.0)),
            ("optimizer.subgradient[beta>0]", lambda: self.check_subgradient(rng, 0.05)),
            ("mt_losses.density_loss", lambda: self.check_density_loss(rng)),
            ("mt_losses.huber_count_loss", lambda: self.check_huber(rng)),
            ("mt_losses.count_loss_batch", lambda: self.check_count_batch(rng)),
        ]
        results = []
        for name, suite in suites:
            worst = suite()
            results.append(CheckResult(name=name, points=self.points,
                                       worst_error=worst, passed=worst <= tol))
            logger.info(f"{name}: worst relative error {worst:.3e} (tol {tol:.1e})")
        return GradCheckReport(tol=tol, results=results)


# Global instance
gradient_checker = GradientChecker()
