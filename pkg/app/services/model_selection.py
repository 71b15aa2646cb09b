"""Cross-validated selection of alpha, beta and the rank bound."""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.config import settings
from app.exceptions import ConfigError
from app.models import GridSettings, Hyperparams, TrainSet
from app.services.optimizer import ApsdOptimizer, predict

logger = logging.getLogger(__name__)


class GridScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float
    beta: float
    r: int
    score: float


class GridSearchResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    best: Hyperparams
    scores: List[GridScore]


def contiguous_folds(n: int, folds: int) -> List[np.ndarray]:
    if folds < 2:
        raise ConfigError("cross-validation needs at least 2 folds")
    if n < folds:
        raise ConfigError(f"cannot split {n} frames into {folds} folds")
    return np.array_split(np.arange(n), folds)


class ModelSelector:
    """k-fold grid search scored by validation block MSE."""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or settings.max_workers
        # restarts run serially inside each fold job
        self.optimizer = ApsdOptimizer(max_workers=1)

    def _fold_score(self, train: TrainSet, hp: Hyperparams, held_out: np.ndarray) -> float:
        mask = np.ones(train.N, dtype=bool)
        mask[held_out] = False
        fit = self.optimizer.fit(train.subset(np.flatnonzero(mask)), hp)
        valid = train.subset(held_out)
        residual = predict(fit.W.data, valid.X) - valid.D
        return float(np.mean(residual**2))

    def grid_search(
        self,
        train: TrainSet,
        base: Hyperparams,
        grid: GridSettings,
        folds: int = settings.cv_folds,
    ) -> GridSearchResult:
        splits = contiguous_folds(train.N, folds)
        limit = min(train.K, train.J)
        points = [
            (alpha, beta, r)
            for alpha, beta, r in itertools.product(grid.alpha, grid.beta, grid.r)
            if r <= limit
        ]
        if not points:
            raise ConfigError(f"no grid point satisfies r <= min(K, J) = {limit}")
        skipped = len(grid.alpha) * len(grid.beta) * len(grid.r) - len(points)
        if skipped:
            logger.info(f"Skipping {skipped} grid points with r > {limit}")

        jobs = [
            (base.model_copy(update={"alpha": a, "beta": b, "r": r}), split)
            for (a, b, r) in points
            for split in splits
        ]
        logger.info(f"Grid search: {len(points)} points x {len(splits)} folds")
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            fold_scores = list(pool.map(lambda job: self._fold_score(train, *job), jobs))

        scores = []
        for p, (alpha, beta, r) in enumerate(points):
            chunk = fold_scores[p * len(splits):(p + 1) * len(splits)]
            scores.append(GridScore(alpha=alpha, beta=beta, r=r, score=float(np.mean(chunk))))
            logger.debug(f"alpha={alpha} beta={beta} r={r}: cv mse {scores[-1].score:.6g}")

        best_index = min(range(len(scores)), key=lambda i: (scores[i].score, i))
        chosen = scores[best_index]
        best = base.model_copy(update={"alpha": chosen.alpha, "beta": chosen.beta, "r": chosen.r})
        logger.info(f"Selected alpha={chosen.alpha} beta={chosen.beta} r={chosen.r}")
        return GridSearchResult(best=best, scores=scores)


# Global instance
model_selector = ModelSelector()
