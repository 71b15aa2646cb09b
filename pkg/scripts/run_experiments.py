#!/usr/bin/env python3
"""End-to-end experiments on simulator scenes: counting accuracy and the rank-constraint benefit."""
import argparse
import json
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

# Add parent directory to path to import app modules
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.models import BlockGrid, FeatureConfig, Hyperparams, SceneConfig, TrainSet  # noqa: E402
from app.services.feature_extractor import feature_extractor  # noqa: E402
from app.services.groundtruth import ground_truth_blocks  # noqa: E402
from app.services.inference import evaluate, predict_dataset  # noqa: E402
from app.services.optimizer import apsd_optimizer  # noqa: E402
from app.services.storage_service import atomic_write  # noqa: E402
from app.services.synthgen import scene_generator  # noqa: E402

MAE_TARGET = 0.15
ARA_TARGET = 0.8
TARGETS_PATH = Path(__file__).parent / "experiment_targets.json"
RECORDED_KEYS = ("mae", "mse", "ara", "mean_count")


def build_split(scene_cfg: SceneConfig, n_train: int, block: int = 16) -> Tuple[TrainSet, TrainSet]:
    """Generate one scene and split it into leading training and trailing held-out frames."""
    scene = scene_generator.generate(scene_cfg)
    grid = BlockGrid.from_roi(scene.roi, block, block)
    X = feature_extractor.extract_dataset(scene.frames, scene.background, grid, FeatureConfig())
    D = ground_truth_blocks(scene.annotations, scene_cfg.width, scene_cfg.height, grid)
    return (
        TrainSet(X=X[:n_train], D=D[:n_train]),
        TrainSet(X=X[n_train:], D=D[n_train:]),
    )


def default_hyperparams(seed: int = 0) -> Hyperparams:
    return Hyperparams(alpha=1e-4, beta=0.0, r=2, eta=0.2, max_iters=2000, restarts=2, tol=1e-10, seed=seed)


def run_counting_experiment(seed: int = 0, n_train: int = 200, n_test: int = 50) -> Dict[str, float]:
    """Train on n_train frames, count vehicles in n_test held-out frames."""
    scene_cfg = SceneConfig(arrival_rate=8.0, far_scale=0.3, n_frames=n_train + n_test, seed=seed)
    train, test = build_split(scene_cfg, n_train)
    fit = apsd_optimizer.fit(train, default_hyperparams(seed))
    clamped, _ = predict_dataset(fit.W, test.X)
    true_counts = test.D.sum(axis=1)
    result = evaluate(true_counts, clamped.sum(axis=1))
    mean_count = float(true_counts.mean())
    return {
        "mae": result.mae,
        "mse": result.mse,
        "ara": result.ara,
        "mean_count": mean_count,
        "relative_mae": result.mae / mean_count if mean_count > 0 else float("inf"),
        "final_objective": fit.final_objective,
    }


def run_rank_benefit_experiment(seed: int = 0, n_train: int = 200, n_test: int = 50) -> Dict[str, float]:
    """Block-level MAE of the per-block rank-r model against one shared regressor."""
    scene_cfg = SceneConfig(arrival_rate=8.0, far_scale=0.2, n_frames=n_train + n_test, seed=seed + 1000)
    train, test = build_split(scene_cfg, n_train)
    ranked = apsd_optimizer.fit(train, default_hyperparams(seed)).W
    shared = apsd_optimizer.fit_shared(train, alpha=1e-4)
    ranked_blocks, _ = predict_dataset(ranked, test.X)
    shared_blocks, _ = predict_dataset(shared, test.X)
    return {
        "rank_block_mae": float(np.mean(np.abs(ranked_blocks - test.D))),
        "shared_block_mae": float(np.mean(np.abs(shared_blocks - test.D))),
    }


def load_targets(path: Path = TARGETS_PATH) -> Dict[str, Dict[str, float]]:
    """Recorded counting metrics keyed by seed; empty when nothing was recorded yet."""
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def record_targets(seed: int, counting: Dict[str, float], path: Path = TARGETS_PATH) -> None:
    """Freeze the counting metrics of `seed` as its regression target."""
    targets = load_targets(path)
    targets[str(seed)] = {key: counting[key] for key in RECORDED_KEYS}
    atomic_write(path, (json.dumps(targets, sort_keys=True, indent=2) + "\n").encode("utf-8"))


def recorded_target(seed: int, path: Path = TARGETS_PATH) -> Optional[Dict[str, float]]:
    return load_targets(path).get(str(seed))


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--record", action="store_true",
                        help=f"store the counting metrics of this seed in {TARGETS_PATH.name}")
    args = parser.parse_args()

    print("=" * 80)
    print("SYNTHETIC COUNTING (200 training frames, 50 held-out frames)")
    print("=" * 80)
    counting = run_counting_experiment(args.seed)
    print(f"  Mean true count: {counting['mean_count']:.3f}")
    print(f"  MAE:             {counting['mae']:.4f} ({100 * counting['relative_mae']:.1f}% of mean)")
    print(f"  MSE:             {counting['mse']:.4f}")
    print(f"  ARA:             {counting['ara']:.4f}")
    print(f"  Objective:       {counting['final_objective']:.6g}")
    mae_ok = counting["relative_mae"] <= MAE_TARGET
    ara_ok = counting["ara"] >= ARA_TARGET
    print(f"  {'✓' if mae_ok else '✗'} MAE within {100 * MAE_TARGET:.0f}% of mean count")
    print(f"  {'✓' if ara_ok else '✗'} ARA at least {ARA_TARGET}")
    if args.record:
        record_targets(args.seed, counting)
        print(f"  Recorded seed {args.seed} in {TARGETS_PATH}")
    else:
        target = recorded_target(args.seed)
        if target is not None:
            drift = max(abs(counting[key] - target[key]) / max(abs(target[key]), 1e-12)
                        for key in RECORDED_KEYS)
            print(f"  Largest relative drift from recorded target: {drift:.2e}")
    print()

    print("=" * 80)
    print("RANK CONSTRAINT VS SHARED REGRESSOR (strong perspective)")
    print("=" * 80)
    benefit = run_rank_benefit_experiment(args.seed)
    print(f"  Rank-r block MAE:  {benefit['rank_block_mae']:.5f}")
    print(f"  Shared block MAE:  {benefit['shared_block_mae']:.5f}")
    rank_ok = benefit["rank_block_mae"] <= benefit["shared_block_mae"]
    print(f"  {'✓' if rank_ok else '✗'} per-block weights do at least as well as one shared regressor")
    print()

    print("=" * 80)
    print("EXPERIMENTS COMPLETE" if mae_ok and ara_ok and rank_ok else "EXPERIMENTS FINISHED WITH MISSES")
    print("=" * 80)
    sys.exit(0 if mae_ok and ara_ok and rank_ok else 1)


if __name__ == "__main__":
    main()
