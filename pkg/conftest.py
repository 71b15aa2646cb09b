"""Shared fixtures: a small synthetic scene written to disk and a matching experiment config."""
import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from app.models import SceneConfig, TrainSet  # noqa: E402
from app.services.synthgen import scene_generator  # noqa: E402


@pytest.fixture
def small_scene() -> SceneConfig:
    return SceneConfig(
        width=96,
        height=64,
        n_lanes=3,
        horizon_row=16,
        base_vehicle=(24, 14),
        arrival_rate=4.0,
        n_frames=6,
        seed=3,
        region_length=40.0,
    )


@pytest.fixture
def scene_config_file(tmp_path, small_scene) -> Path:
    path = tmp_path / "scene.json"
    path.write_text(small_scene.model_dump_json(indent=2))
    return path


@pytest.fixture
def dataset_manifest(tmp_path, small_scene) -> Path:
    scene = scene_generator.generate(small_scene)
    return scene_generator.write(scene, tmp_path / "data")


def experiment_payload(manifest: Path, **hyperparams) -> dict:
    hp = {
        "alpha": 1e-4,
        "beta": 0.0,
        "r": 2,
        "eta": 0.2,
        "max_iters": 150,
        "restarts": 2,
        "tol": 1e-9,
        "seed": 0,
    }
    hp.update(hyperparams)
    return {
        "manifest": str(manifest),
        "out_dir": str(manifest.parent.parent / "run"),
        "block_w": 16,
        "block_h": 16,
        "fg_threshold": 25,
        "hyperparams": hp,
    }


@pytest.fixture
def experiment_file(tmp_path, dataset_manifest) -> Path:
    path = tmp_path / "experiment.json"
    path.write_text(json.dumps(experiment_payload(dataset_manifest)))
    return path


def planted_features(rng: np.random.Generator, N: int, J: int, K: int) -> np.ndarray:
    """Near one-hot features: block j of frame i is dominated by feature (i + j) mod K."""
    X = 0.1 * rng.uniform(0.0, 1.0, (N, J, K))
    for i in range(N):
        for j in range(J):
            X[i, j, (i + j) % K] += 1.0
    return X


def planted_problem(seed: int = 0, N: int = 50, J: int = 8, K: int = 6, noise: float = 0.0):
    """
    Rank-1 planted weights with near one-hot features.

    Returns (train set, planted W, step size 1/L).
    """
    rng = np.random.default_rng(seed)
    X = planted_features(rng, N, J, K)
    u = rng.uniform(0.5, 1.5, K)
    v = rng.uniform(0.5, 1.5, J)
    W_star = np.outer(u, v)
    D = np.einsum("ijk,kj->ij", X, W_star)
    if noise > 0:
        D = np.maximum(D + noise * D.mean() * rng.standard_normal(D.shape), 0.0)
    L = max(np.linalg.eigvalsh(X[:, j, :].T @ X[:, j, :] / N).max() for j in range(J))
    return TrainSet(X=X, D=D), W_star, 1.0 / L


@pytest.fixture
def planted():
    return planted_problem()
