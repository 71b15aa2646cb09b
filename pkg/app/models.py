"""Data models for the traffic density pipeline."""
import hashlib
import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import settings
from app.exceptions import ConfigError


def _readonly(values, dtype) -> np.ndarray:
    """Copy into a contiguous array of the given dtype and freeze it."""
    out = np.array(values, dtype=dtype, copy=True, order="C")
    out.setflags(write=False)
    return out


def canonical_hash(payload: dict) -> str:
    """SHA-256 of the canonical JSON encoding of a payload."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class ArrayModel(BaseModel):
    """Immutable model that may hold numpy arrays."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


# ---------------------------------------------------------------------------
# Rasters and annotations
# ---------------------------------------------------------------------------

class Frame(ArrayModel):
    """
    Grayscale frame; pixels are stored as a (height, width) uint8 array.

    `header` keeps the raw PGM header bytes of a decoded file so that saving
    it reproduces the original file exactly.
    """
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    pixels: np.ndarray
    header: Optional[bytes] = Field(default=None, repr=False)

    @field_validator("pixels", mode="before")
    @classmethod
    def _coerce_pixels(cls, value):
        arr = np.asarray(value)
        if arr.dtype != np.uint8:
            if arr.size and (arr.min() < 0 or arr.max() > 255):
                raise ValueError("pixel intensities must lie in [0, 255]")
            if arr.size and not np.issubdtype(arr.dtype, np.integer):
                if not np.array_equal(arr, np.round(arr)):
                    raise ValueError("pixel intensities must be integers")
        return _readonly(arr, np.uint8)

    @model_validator(mode="after")
    def _check_buffer(self):
        if self.pixels.size != self.width * self.height:
            raise ValueError(
                f"pixel buffer has {self.pixels.size} values, expected "
                f"{self.width}x{self.height}"
            )
        if self.pixels.shape != (self.height, self.width):
            object.__setattr__(self, "pixels", _readonly(
                self.pixels.reshape(self.height, self.width), np.uint8))
        return self


class BBox(BaseModel):
    """Half-open integer rectangle: [x0, x1) x [y0, y1)."""
    model_config = ConfigDict(frozen=True)

    x0: int
    y0: int
    x1: int
    y1: int

    @model_validator(mode="after")
    def _check_extent(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(
                f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})"
            )
        return self

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def clip(self, width: int, height: int) -> Optional["BBox"]:
        """Intersection with a width x height frame, or None if empty."""
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, width), min(self.y1, height)
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox(x0=x0, y0=y0, x1=x1, y1=y1)

    def shifted(self, dx: int = 0, dy: int = 0) -> "BBox":
        return BBox(x0=self.x0 + dx, y0=self.y0 + dy,
                    x1=self.x1 + dx, y1=self.y1 + dy)

    def iou(self, other: "BBox") -> float:
        ix = min(self.x1, other.x1) - max(self.x0, other.x0)
        iy = min(self.y1, other.y1) - max(self.y0, other.y0)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.area + other.area - inter)


class Annotation(BaseModel):
    """Boxes annotated on one frame."""
    model_config = ConfigDict(frozen=True)

    frame_id: str
    boxes: Tuple[BBox, ...] = ()


class Roi(BaseModel):
    """Region of interest and its physical length along the road."""
    model_config = ConfigDict(frozen=True)

    rect: BBox
    region_length: float = Field(gt=0)

    def check_within(self, width: int, height: int) -> None:
        r = self.rect
        if r.x0 < 0 or r.y0 < 0 or r.x1 > width or r.y1 > height:
            raise ConfigError(
                f"ROI ({r.x0},{r.y0},{r.x1},{r.y1}) is not inside a "
                f"{width}x{height} frame"
            )


class DensityMap(ArrayModel):
    """Per-pixel vehicle density (vehicles / pixel), shape (height, width)."""
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _coerce_values(cls, value):
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("density values must be finite")
        if arr.size and arr.min() < 0:
            raise ValueError("density values must be non-negative")
        return _readonly(arr, np.float64)

    @model_validator(mode="after")
    def _check_shape(self):
        if self.values.size != self.width * self.height:
            raise ValueError(
                f"density raster has {self.values.size} values, expected "
                f"{self.width}x{self.height}"
            )
        if self.values.shape != (self.height, self.width):
            object.__setattr__(self, "values", _readonly(
                self.values.reshape(self.height, self.width), np.float64))
        return self

    def total(self) -> float:
        return float(self.values.sum())


class BlockGrid(BaseModel):
    """Row-major tiling of the ROI; block j = row * cols + col."""
    model_config = ConfigDict(frozen=True)

    roi: Roi
    block_w: int = Field(ge=1)
    block_h: int = Field(ge=1)
    rows: int = Field(ge=1)
    cols: int = Field(ge=1)

    @classmethod
    def from_roi(cls, roi: Roi, block_w: int, block_h: int) -> "BlockGrid":
        rect = roi.rect
        return cls(
            roi=roi,
            block_w=block_w,
            block_h=block_h,
            rows=math.ceil(rect.height / block_h),
            cols=math.ceil(rect.width / block_w),
        )

    @model_validator(mode="after")
    def _check_tiling(self):
        rect = self.roi.rect
        if (self.rows != math.ceil(rect.height / self.block_h)
                or self.cols != math.ceil(rect.width / self.block_w)):
            raise ValueError("rows/cols do not tile the ROI with the block size")
        return self

    @property
    def J(self) -> int:
        return self.rows * self.cols

    def labels(self) -> np.ndarray:
        """Block index of every ROI pixel, shape (roi height, roi width)."""
        rect = self.roi.rect
        row_idx = np.arange(rect.height) // self.block_h
        col_idx = np.arange(rect.width) // self.block_w
        return row_idx[:, None] * self.cols + col_idx[None, :]

    def block_rect(self, j: int) -> BBox:
        """Block j in frame coordinates; edge blocks may be smaller."""
        if not 0 <= j < self.J:
            raise IndexError(f"block index {j} outside [0, {self.J})")
        rect = self.roi.rect
        row, col = divmod(j, self.cols)
        x0 = rect.x0 + col * self.block_w
        y0 = rect.y0 + row * self.block_h
        return BBox(x0=x0, y0=y0,
                    x1=min(x0 + self.block_w, rect.x1),
                    y1=min(y0 + self.block_h, rect.y1))

    def block_sizes(self) -> np.ndarray:
        return np.bincount(self.labels().ravel(), minlength=self.J)


class FeatureMatrix(ArrayModel):
    """Block features of one frame, shape (J, K)."""
    data: np.ndarray

    @field_validator("data", mode="before")
    @classmethod
    def _coerce(cls, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("feature matrix must be two-dimensional (J, K)")
        return _readonly(arr, np.float64)

    @property
    def J(self) -> int:
        return self.data.shape[0]

    @property
    def K(self) -> int:
        return self.data.shape[1]


class WeightMatrix(ArrayModel):
    """Block regressors stacked as columns, shape (K, J)."""
    data: np.ndarray

    @field_validator("data", mode="before")
    @classmethod
    def _coerce(cls, value):
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("weight matrix must be two-dimensional (K, J)")
        return _readonly(arr, np.float64)

    @property
    def K(self) -> int:
        return self.data.shape[0]

    @property
    def J(self) -> int:
        return self.data.shape[1]

    def rank(self, rel_tol: float = 1e-10) -> int:
        s = np.linalg.svd(self.data, compute_uv=False)
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > rel_tol * s[0]))


class FgMask(ArrayModel):
    """Foreground bits, shape (height, width), True = foreground."""
    width: int = Field(ge=1)
    height: int = Field(ge=1)
    bits: np.ndarray

    @field_validator("bits", mode="before")
    @classmethod
    def _coerce(cls, value):
        return _readonly(np.asarray(value), bool)

    @model_validator(mode="after")
    def _check_shape(self):
        if self.bits.shape != (self.height, self.width):
            raise ValueError("mask dimensions must match the frame")
        return self


# ---------------------------------------------------------------------------
# Configuration models
# ---------------------------------------------------------------------------

class FeatureConfig(BaseModel):
    """Histogram block features; K follows from the flags."""
    model_config = ConfigDict(frozen=True)

    intensity_bins: int = Field(default=8, ge=2)
    orient_bins: int = Field(default=8, ge=2)
    include_fg_ratio: bool = True
    include_bias: bool = True

    @property
    def K(self) -> int:
        return (self.intensity_bins + self.orient_bins
                + int(self.include_fg_ratio) + int(self.include_bias))

    def feature_hash(self, block_w: int, block_h: int, fg_threshold: int) -> str:
        """Hash of everything that changes the feature stack."""
        return canonical_hash({
            "features": self.model_dump(mode="json"),
            "block_w": block_w,
            "block_h": block_h,
            "fg_threshold": fg_threshold,
        })


class Hyperparams(BaseModel):
    """Regularization, rank bound and solver settings for the block regression."""
    model_config = ConfigDict(frozen=True)

    alpha: float = Field(default=1e-3, ge=0)
    beta: float = Field(default=0.0, ge=0)
    r: int = Field(default=2, ge=1)
    eta: float = Field(default=1e-2, gt=0)
    max_iters: int = Field(default=500, ge=1)
    restarts: int = Field(default=3, ge=1)
    tol: float = Field(default=1e-6, gt=0)
    seed: int = 0
    accelerated: bool = True
    step_schedule: Literal["constant", "inv_sqrt"] = "constant"

    def check_shape(self, K: int, J: int) -> None:
        if self.r > min(K, J):
            raise ConfigError(
                f"rank bound r={self.r} must satisfy r <= min(K, J) = {min(K, J)}"
            )


class GridSettings(BaseModel):
    """Cross-validation grid over alpha, beta and r."""
    model_config = ConfigDict(frozen=True)

    alpha: List[float] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    beta: List[float] = Field(default_factory=lambda: [0.0, 1e-4, 1e-3])
    r: List[int] = Field(default_factory=lambda: [1, 2, 4])


class SceneConfig(BaseModel):
    """Synthetic traffic scene with linear perspective scaling."""
    model_config = ConfigDict(frozen=True)

    width: int = Field(default=160, ge=8)
    height: int = Field(default=120, ge=8)
    n_lanes: int = Field(default=3, ge=1)
    horizon_row: int = Field(default=20, ge=0)
    near_scale: float = Field(default=1.0, gt=0)
    far_scale: float = Field(default=0.3, gt=0)
    base_vehicle: Tuple[int, int] = (28, 18)
    arrival_rate: float = Field(default=8.0, ge=0)
    intensity_fg_range: Tuple[int, int] = (150, 230)
    intensity_bg: int = Field(default=90, ge=0, le=255)
    noise_sigma: float = Field(default=2.0, ge=0)
    n_frames: int = Field(default=20, ge=1)
    seed: int = 0
    max_iou: float = Field(default=settings.max_iou, ge=0, lt=1)
    region_length: float = Field(default=100.0, gt=0)
    lane_markings: bool = True

    @model_validator(mode="after")
    def _check_geometry(self):
        if not self.far_scale < self.near_scale:
            raise ValueError("far_scale must be smaller than near_scale")
        if not self.horizon_row < self.height:
            raise ValueError("horizon_row must be above the bottom row")
        bw, bh = self.base_vehicle
        if bw < 1 or bh < 1:
            raise ValueError("base_vehicle dimensions must be positive")
        lo, hi = self.intensity_fg_range
        if not 0 <= lo <= hi <= 255:
            raise ValueError("intensity_fg_range must satisfy 0 <= lo <= hi <= 255")
        return self

    @property
    def roi_rect(self) -> BBox:
        """Road area between the horizon and the bottom of the frame."""
        return BBox(x0=0, y0=self.horizon_row, x1=self.width, y1=self.height)

    def config_hash(self) -> str:
        return canonical_hash(self.model_dump(mode="json"))


class ExperimentConfig(BaseModel):
    """Everything `train` and `eval` need to reproduce a run."""
    model_config = ConfigDict(frozen=True)

    manifest: str
    test_manifest: Optional[str] = None
    out_dir: str = "runs/experiment"
    block_w: int = Field(default=16, ge=1)
    block_h: int = Field(default=16, ge=1)
    fg_threshold: int = Field(default=settings.fg_threshold, gt=0, lt=255)
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    hyperparams: Hyperparams = Field(default_factory=Hyperparams)
    ground_truth: Literal["box", "gaussian"] = "box"
    gaussian_sigma: float = Field(default=4.0, gt=0)
    cross_validate: bool = False
    cv_folds: int = Field(default=settings.cv_folds, ge=2)
    grid: GridSettings = Field(default_factory=GridSettings)
    train_mae_threshold: Optional[float] = Field(default=None, gt=0)

    @field_validator("manifest", "test_manifest")
    @classmethod
    def _path_exists(cls, value):
        if value is not None and not Path(value).exists():
            raise ValueError(f"path does not exist: {value}")
        return value

    def feature_hash(self) -> str:
        return self.features.feature_hash(self.block_w, self.block_h, self.fg_threshold)

    def config_hash(self) -> str:
        return canonical_hash(self.model_dump(mode="json"))


class FrameEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    frame_id: str
    path: str


class DatasetManifest(BaseModel):
    """Dataset listing; relative paths resolve against the manifest's directory."""
    model_config = ConfigDict(frozen=True)

    frames: List[FrameEntry]
    annotations: str
    background: str
    roi: BBox
    region_length: float = Field(gt=0)
    scene_hash: Optional[str] = None

    @field_validator("frames")
    @classmethod
    def _unique_ids(cls, value):
        ids = [entry.frame_id for entry in value]
        if len(set(ids)) != len(ids):
            raise ValueError("frame_id values must be unique")
        return value

    @property
    def roi_model(self) -> Roi:
        return Roi(rect=self.roi, region_length=self.region_length)


# ---------------------------------------------------------------------------
# Training and evaluation
# ---------------------------------------------------------------------------

class TrainSet(ArrayModel):
    """Feature stack X (N, J, K) with block density targets D (N, J)."""
    X: np.ndarray
    D: np.ndarray

    @field_validator("X", "D", mode="before")
    @classmethod
    def _coerce(cls, value):
        return _readonly(np.asarray(value, dtype=np.float64), np.float64)

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.X.ndim != 3 or self.D.ndim != 2:
            raise ValueError("X must be (N, J, K) and D must be (N, J)")
        if self.X.shape[:2] != self.D.shape:
            raise ValueError(
                f"X has shape {self.X.shape} but D has shape {self.D.shape}"
            )
        if self.D.size and self.D.min() < 0:
            raise ValueError("block densities must be non-negative")
        return self

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def J(self) -> int:
        return self.X.shape[1]

    @property
    def K(self) -> int:
        return self.X.shape[2]

    def subset(self, indices) -> "TrainSet":
        idx = np.asarray(indices, dtype=np.intp)
        return TrainSet(X=self.X[idx], D=self.D[idx])


class FitReport(ArrayModel):
    """Winning restart of an APSD fit and the traces of every restart."""
    W: WeightMatrix
    objective_trace: Tuple[float, ...] = Field(min_length=1)
    iterations: int
    restart_index: int
    converged: bool
    final_objective: float
    restart_objectives: Tuple[float, ...]
    traces: Tuple[Tuple[float, ...], ...]


class EvalResult(BaseModel):
    """Count metrics over a set of frames."""
    model_config = ConfigDict(frozen=True)

    mae: float = Field(ge=0)
    mse: float = Field(ge=0)
    ara: float = Field(le=1)
    per_frame: Tuple[Tuple[str, float, float], ...] = ()


class CountPrediction(BaseModel):
    """Count as density integral plus an offset."""
    model_config = ConfigDict(frozen=True)

    base_count: float
    offset: float
    total: float

    @model_validator(mode="before")
    @classmethod
    def _fill_total(cls, data):
        if isinstance(data, dict) and "total" not in data:
            data = {**data, "total": data["base_count"] + data["offset"]}
        return data

    @model_validator(mode="after")
    def _check_total(self):
        if self.total != self.base_count + self.offset:
            raise ValueError("total must equal base_count + offset")
        return self


class ModelHeader(BaseModel):
    """JSON header of a trained model file."""
    model_config = ConfigDict(frozen=True)

    K: int = Field(ge=1)
    J: int = Field(ge=1)
    r: int = Field(ge=1)
    alpha: float
    beta: float
    block_w: int
    block_h: int
    fg_threshold: int
    feature_config: FeatureConfig
    feature_hash: str
    config_hash: str
