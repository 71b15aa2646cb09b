"""Subcommand handlers: each one drives the services and maps failures to exit codes."""
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from app.exceptions import (
    CompatibilityError,
    ConfigError,
    DataFormatError,
    DensityError,
    DivergenceError,
    ShapeMismatchError,
    SvdError,
)
from app.models import (
    BlockGrid,
    EvalResult,
    ExperimentConfig,
    FeatureConfig,
    Hyperparams,
    ModelHeader,
    TrainSet,
)
from app.services.feature_extractor import feature_extractor
from app.services.gradcheck import GradCheckReport, gradient_checker
from app.services.groundtruth import ground_truth_blocks
from app.services.inference import count_frames, evaluate, predict_dataset
from app.services.model_selection import model_selector
from app.services.optimizer import apsd_optimizer
from app.services.storage_service import Dataset, storage_service
from app.services.synthgen import scene_generator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_COMPATIBILITY = 5


class CommandError(Exception):
    """A handled failure carrying the process exit code."""

    def __init__(self, exit_code: int, detail: str, lines: Sequence[str] = ()):
        super().__init__(detail)
        self.exit_code = exit_code
        self.detail = detail
        self.lines = tuple(lines)


def _as_command_error(exc: Exception) -> CommandError:
    if isinstance(exc, CompatibilityError):
        return CommandError(EXIT_COMPATIBILITY, str(exc))
    if isinstance(exc, (DivergenceError, SvdError)):
        return CommandError(EXIT_DIVERGENCE, str(exc))
    if isinstance(exc, (ConfigError, ValidationError)):
        return CommandError(EXIT_CONFIG, str(exc))
    if isinstance(exc, (OSError, DataFormatError, ShapeMismatchError, ValueError)):
        return CommandError(EXIT_IO, str(exc))
    return CommandError(EXIT_CHECK_FAILED, str(exc))


class SynthSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    frames: int
    vehicles_total: int
    manifest: str


class TrainSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    model_path: str
    log_path: str
    hyperparams: Hyperparams
    final_objective: float
    train_mae: float
    train_ara: float
    config_hash: str


class EvalSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    result: EvalResult
    csv_path: str
    json_path: str


def _block_grid(dataset: Dataset, block_w: int, block_h: int) -> BlockGrid:
    return BlockGrid.from_roi(dataset.roi, block_w, block_h)


def _dataset_targets(dataset: Dataset, grid: BlockGrid, method: str = "box",
                     sigma: float = 4.0) -> np.ndarray:
    return ground_truth_blocks(dataset.annotations, dataset.background.width,
                               dataset.background.height, grid, method, sigma)


def _dataset_features(dataset: Dataset, grid: BlockGrid, features: FeatureConfig,
                      fg_threshold: int) -> np.ndarray:
    return feature_extractor.extract_dataset(
        dataset.frames, dataset.background, grid, features, fg_threshold)


def cmd_synth(config_path: Path, out: Optional[Path] = None, seed: Optional[int] = None) -> SynthSummary:
    """Generate a synthetic dataset and its manifest."""
    try:
        cfg = storage_service.load_scene_config(config_path)
        if seed is not None:
            cfg = cfg.model_copy(update={"seed": seed})
        out_dir = Path(out) if out is not None else Path(config_path).parent / "dataset"
        scene = scene_generator.generate(cfg)
        manifest = scene_generator.write(scene, out_dir)
        storage_service.save_scene_config(cfg, out_dir / "scene.json")
    except (DensityError, ValueError, OSError) as exc:
        raise _as_command_error(exc) from exc
    return SynthSummary(frames=len(scene.frames), vehicles_total=scene.vehicles_total,
                        manifest=str(manifest))


def cmd_train(config_path: Path, out: Optional[Path] = None, seed: Optional[int] = None) -> TrainSummary:
    """Extract features, optionally cross-validate, fit the block regressors and write the model."""
    try:
        cfg = storage_service.load_experiment_config(config_path)
        hp = cfg.hyperparams
        if seed is not None:
            hp = hp.model_copy(update={"seed": seed})
            cfg = cfg.model_copy(update={"hyperparams": hp})
        out_dir = Path(out) if out is not None else Path(cfg.out_dir)

        dataset = storage_service.load_dataset(cfg.manifest)
        grid = _block_grid(dataset, cfg.block_w, cfg.block_h)
        hp.check_shape(cfg.features.K, grid.J)

        stack = _dataset_features(dataset, grid, cfg.features, cfg.fg_threshold)
        targets = _dataset_targets(dataset, grid, cfg.ground_truth, cfg.gaussian_sigma)
        train = TrainSet(X=stack, D=targets)

        if cfg.cross_validate:
            selection = model_selector.grid_search(train, hp, cfg.grid, cfg.cv_folds)
            hp = selection.best
        fit = apsd_optimizer.fit(train, hp)

        header = ModelHeader(
            K=train.K,
            J=train.J,
            r=hp.r,
            alpha=hp.alpha,
            beta=hp.beta,
            block_w=cfg.block_w,
            block_h=cfg.block_h,
            fg_threshold=cfg.fg_threshold,
            feature_config=cfg.features,
            feature_hash=cfg.feature_hash(),
            config_hash=cfg.config_hash(),
        )
        model_path = out_dir / "model.bin"
        log_path = out_dir / "train_log.csv"
        storage_service.save_model(header, fit.W, model_path)
        storage_service.write_training_log(fit.traces, log_path, header.config_hash)
        storage_service.save_features(stack, out_dir / "features.feat")

        clamped, _ = predict_dataset(fit.W, stack)
        train_eval = evaluate(targets.sum(axis=1), clamped.sum(axis=1), dataset.frame_ids)
    except (DensityError, ValueError, OSError) as exc:
        raise _as_command_error(exc) from exc

    if cfg.train_mae_threshold is not None and train_eval.mae > cfg.train_mae_threshold:
        logger.warning(
            f"train MAE {train_eval.mae:.4f} exceeds the configured threshold "
            f"{cfg.train_mae_threshold}"
        )
    logger.info(f"Wrote model to {model_path} (train MAE {train_eval.mae:.4f})")
    return TrainSummary(
        model_path=str(model_path),
        log_path=str(log_path),
        hyperparams=hp,
        final_objective=fit.final_objective,
        train_mae=train_eval.mae,
        train_ara=train_eval.ara,
        config_hash=header.config_hash,
    )


def _load_compatible_model(model_path: Path, config_path: Optional[Path]):
    header, weights = storage_service.load_model(model_path)
    own_hash = header.feature_config.feature_hash(header.block_w, header.block_h, header.fg_threshold)
    if own_hash != header.feature_hash:
        raise CompatibilityError("model header feature hash does not match its feature settings")
    cfg: Optional[ExperimentConfig] = None
    if config_path is not None:
        cfg = storage_service.load_experiment_config(config_path)
        if cfg.feature_hash() != header.feature_hash:
            raise CompatibilityError(
                f"feature hash mismatch: model {header.feature_hash[:12]} vs "
                f"config {cfg.feature_hash()[:12]}"
            )
    return header, weights, cfg


def _model_inputs(header: ModelHeader, manifest_path: Path) -> Tuple[Dataset, BlockGrid, np.ndarray]:
    dataset = storage_service.load_dataset(manifest_path)
    grid = _block_grid(dataset, header.block_w, header.block_h)
    if grid.J != header.J or header.feature_config.K != header.K:
        raise CompatibilityError(
            f"dataset ROI gives J={grid.J} blocks but the model was trained with J={header.J}"
        )
    return dataset, grid, _dataset_features(dataset, grid, header.feature_config, header.fg_threshold)


def _eval_manifest(manifest_path: Optional[Path], cfg: Optional[ExperimentConfig]) -> Path:
    if manifest_path is not None:
        return Path(manifest_path)
    if cfg is None:
        raise ConfigError("eval needs --manifest or a --config naming a dataset")
    return Path(cfg.test_manifest or cfg.manifest)


def cmd_predict(model_path: Path, manifest_path: Path, out: Optional[Path] = None) -> Path:
    """Per-frame counts and traffic density for every frame of a dataset."""
    try:
        header, weights, _ = _load_compatible_model(model_path, None)
        dataset, _, stack = _model_inputs(header, manifest_path)
        rows = count_frames(dataset.frame_ids, weights, stack, dataset.roi)
        out_path = (Path(out) if out is not None else Path(model_path).parent) / "predictions.csv"
        storage_service.write_predictions(rows, out_path, header.config_hash)
    except (DensityError, ValueError, OSError) as exc:
        raise _as_command_error(exc) from exc
    return out_path


def cmd_eval(model_path: Path, manifest_path: Optional[Path], config_path: Optional[Path] = None,
             out: Optional[Path] = None) -> EvalSummary:
    """Compare predicted counts with ground truth and write the per-frame CSV and JSON summary."""
    try:
        header, weights, cfg = _load_compatible_model(model_path, config_path)
        manifest_path = _eval_manifest(manifest_path, cfg)
        dataset, grid, stack = _model_inputs(header, manifest_path)
        method = cfg.ground_truth if cfg is not None else "box"
        sigma = cfg.gaussian_sigma if cfg is not None else 4.0
        true_counts = _dataset_targets(dataset, grid, method, sigma).sum(axis=1)
        clamped, raw = predict_dataset(weights, stack)
        logger.info(
            f"Raw count total {raw.sum():.3f}, clamped count total {clamped.sum():.3f}"
        )
        result = evaluate(true_counts, clamped.sum(axis=1), dataset.frame_ids)
        out_dir = Path(out) if out is not None else Path(model_path).parent / "eval"
        csv_path, json_path = storage_service.write_eval_report(result, out_dir, header.config_hash)
    except (DensityError, ValueError, OSError) as exc:
        raise _as_command_error(exc) from exc
    logger.info(f"MAE {result.mae:.4f} MSE {result.mse:.4f} ARA {result.ara:.4f}")
    return EvalSummary(result=result, csv_path=str(csv_path), json_path=str(json_path))


def cmd_check_grad(tol: Optional[float] = None, seed: int = 0) -> GradCheckReport:
    """Run every finite-difference suite; raises CommandError(1) naming the worst check on failure."""
    report = gradient_checker.run(tol=tol, seed=seed)
    if not report.passed:
        worst = report.worst
        raise CommandError(
            EXIT_CHECK_FAILED,
            f"gradient check failed: {worst.name} relative error {worst.worst_error:.3e} "
            f"exceeds {report.tol:.1e}",
            format_check_report(report),
        )
    return report


def format_check_report(report: GradCheckReport) -> List[str]:
    return [
        f"{'PASS' if r.passed else 'FAIL'} {r.name} points={r.points} max_rel_err={r.worst_error:.3e}"
        for r in report.results
    ]
