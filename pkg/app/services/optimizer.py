"""Rank-constrained block regression solved by accelerated projected subgradient descent."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import List, NamedTuple, Optional

import numpy as np
import scipy.linalg

from app.config import settings
from app.exceptions import ConfigError, DivergenceError, ShapeMismatchError, SvdError
from app.models import FitReport, Hyperparams, TrainSet, WeightMatrix

logger = logging.getLogger(__name__)

# Convergence compares the objective with its value this many iterations earlier
CONVERGENCE_WINDOW = 5
INIT_SCALE = 0.01


def _check_shapes(W: np.ndarray, train: TrainSet) -> None:
    if W.shape != (train.K, train.J):
        raise ShapeMismatchError(
            f"W has shape {W.shape}, expected (K, J) = ({train.K}, {train.J})"
        )


def predict(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Raw block predictions w_j . x_j^(i), shape (N, J)."""
    return np.einsum("ijk,kj->ij", X, W)


def objective(W: np.ndarray, train: TrainSet, alpha: float, beta: float) -> float:
    """(1/2N) sum of squared block residuals + alpha ||W||_F^2 + beta |W|_1."""
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, train)
    residual = predict(W, train.X) - train.D
    data_term = 0.5 * float(np.sum(residual**2)) / train.N
    return data_term + alpha * float(np.sum(W**2)) + beta * float(np.sum(np.abs(W)))


def subgradient(W: np.ndarray, train: TrainSet, alpha: float, beta: float) -> np.ndarray:
    """
    Subgradient of the objective, shape (K, J).

    The L1 term uses sign+(w) = +1 for w >= 0 and -1 otherwise, so a zero
    entry contributes +beta.
    """
    W = np.asarray(W, dtype=np.float64)
    _check_shapes(W, train)
    residual = predict(W, train.X) - train.D
    grad = np.einsum("ij,ijk->kj", residual, train.X) / train.N
    return grad + 2.0 * alpha * W + beta * np.where(W >= 0, 1.0, -1.0)


def rank_project(A: np.ndarray, r: int) -> np.ndarray:
    """Frobenius-nearest matrix of rank <= r (truncated SVD)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeMismatchError("rank projection needs a matrix")
    if not 1 <= r <= min(A.shape):
        raise ConfigError(f"rank bound r={r} must lie in [1, {min(A.shape)}]")
    try:
        U, s, Vt = scipy.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError:
        logger.debug("gesdd did not converge, retrying with gesvd")
        try:
            U, s, Vt = scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise SvdError(f"SVD did not converge: {exc}")
    return (U[:, :r] * s[:r]) @ Vt[:r]


def momentum_step(t: float) -> float:
    """t_{k+1} = (1 + sqrt(1 + 4 t_k^2)) / 2."""
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))


class _Run(NamedTuple):
    W: np.ndarray
    trace: List[float]
    best_objective: float
    converged: bool


class ApsdOptimizer:
    """Fits one linear regressor per block with a shared low-rank structure."""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or settings.max_workers

    def initial_weights(self, K: int, J: int, hp: Hyperparams, restart: int) -> np.ndarray:
        """Uniform entries in [-0.01, 0.01], rank-projected; seeded by (seed, restart)."""
        rng = np.random.default_rng([hp.seed, restart])
        return rank_project(rng.uniform(-INIT_SCALE, INIT_SCALE, size=(K, J)), hp.r)

    def _run(self, train: TrainSet, hp: Hyperparams, restart: int) -> _Run:
        W_prev = self.initial_weights(train.K, train.J, hp, restart)
        A = W_prev.copy()
        t = 1.0
        best_W = W_prev
        best = objective(W_prev, train, hp.alpha, hp.beta)
        trace = [best]
        converged = False

        for k in range(1, hp.max_iters + 1):
            step = hp.eta if hp.step_schedule == "constant" else hp.eta / math.sqrt(k)
            with np.errstate(over="ignore", invalid="ignore"):
                A_step = A - step * subgradient(A, train, hp.alpha, hp.beta)
            if not np.all(np.isfinite(A_step)):
                raise DivergenceError(
                    f"non-finite iterate at iteration {k} of restart {restart}; "
                    f"step size eta={hp.eta} is too large"
                )
            W = rank_project(A_step, hp.r)

            if hp.accelerated:
                t_next = momentum_step(t)
                A = W + ((t - 1.0) / t_next) * (W - W_prev)
                t = t_next
            else:
                A = W
            W_prev = W

            with np.errstate(over="ignore", invalid="ignore"):
                value = objective(W, train, hp.alpha, hp.beta)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite objective at iteration {k} of restart {restart}; "
                    f"step size eta={hp.eta} is too large"
                )
            trace.append(value)
            if value < best:
                best, best_W = value, W

            if k >= CONVERGENCE_WINDOW:
                previous = trace[-1 - CONVERGENCE_WINDOW]
                if abs(value - previous) <= hp.tol * max(abs(previous), np.finfo(float).tiny):
                    converged = True
                    break

        logger.debug(
            f"restart {restart}: {len(trace) - 1} iterations, best objective {best:.6g}, "
            f"converged={converged}"
        )
        return _Run(W=best_W, trace=trace, best_objective=best, converged=converged)

    def fit(self, train: TrainSet, hp: Hyperparams) -> FitReport:
        """Best of hp.restarts independent runs; ties go to the lowest restart index."""
        if train.N < 1:
            raise ConfigError("training set is empty")
        hp.check_shape(train.K, train.J)
        logger.info(
            f"APSD fit: N={train.N} J={train.J} K={train.K} r={hp.r} "
            f"alpha={hp.alpha} beta={hp.beta} eta={hp.eta} restarts={hp.restarts}"
        )
        workers = min(self.max_workers, hp.restarts)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                runs = list(pool.map(lambda i: self._run(train, hp, i), range(hp.restarts)))
        else:
            runs = [self._run(train, hp, i) for i in range(hp.restarts)]

        winner = min(range(len(runs)), key=lambda i: (runs[i].best_objective, i))
        run = runs[winner]
        logger.info(f"Selected restart {winner} with objective {run.best_objective:.6g}")
        return FitReport(
            W=WeightMatrix(data=run.W),
            objective_trace=tuple(float(v) for v in run.trace),
            iterations=len(run.trace) - 1,
            restart_index=winner,
            converged=run.converged,
            final_objective=float(run.best_objective),
            restart_objectives=tuple(float(r.best_objective) for r in runs),
            traces=tuple(tuple(float(v) for v in r.trace) for r in runs),
        )

    def fit_shared(self, train: TrainSet, alpha: float = 0.0) -> WeightMatrix:
        """One ridge regressor w used by every block, returned as W = [w ... w]."""
        if train.N < 1:
            raise ConfigError("training set is empty")
        X = train.X.reshape(-1, train.K) / math.sqrt(train.N)
        y = train.D.reshape(-1) / math.sqrt(train.N)
        if alpha > 0:
            X = np.vstack([X, math.sqrt(2.0 * alpha * train.J) * np.eye(train.K)])
            y = np.concatenate([y, np.zeros(train.K)])
        w, *_ = scipy.linalg.lstsq(X, y)
        return WeightMatrix(data=np.tile(w[:, None], (1, train.J)))


# Global instance
apsd_optimizer = ApsdOptimizer()
