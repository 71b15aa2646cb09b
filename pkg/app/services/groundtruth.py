"""Ground-truth density maps and block densities from box annotations."""
import logging
from typing import Iterable, Literal, Sequence, Tuple

import numpy as np

from app.config import settings
from app.exceptions import ConfigError, ShapeMismatchError
from app.models import Annotation, BBox, BlockGrid, DensityMap

logger = logging.getLogger(__name__)


def box_density(width: int, height: int, boxes: Iterable[BBox]) -> DensityMap:
    """
    Uniform box density: every pixel covered by box o receives 1 / A(o).

    Boxes partially outside the frame are clipped, but the weight keeps the
    original area, so only the visible fraction of the vehicle is counted.
    """
    if width < 1 or height < 1:
        raise ShapeMismatchError("frame dimensions must be positive")
    values = np.zeros((height, width), dtype=np.float64)
    for box in boxes:
        visible = box.clip(width, height)
        if visible is None:
            raise ValueError(
                f"box ({box.x0},{box.y0},{box.x1},{box.y1}) does not intersect "
                f"the {width}x{height} frame"
            )
        values[visible.y0:visible.y1, visible.x0:visible.x1] += 1.0 / box.area
    return DensityMap(width=width, height=height, values=values)


def block_density(density: DensityMap, grid: BlockGrid) -> np.ndarray:
    """Density mass of each block, indexed j = row * cols + col."""
    rect = grid.roi.rect
    if rect.x0 < 0 or rect.y0 < 0 or rect.x1 > density.width or rect.y1 > density.height:
        raise ShapeMismatchError(
            f"grid ROI ({rect.x0},{rect.y0},{rect.x1},{rect.y1}) is not contained in the "
            f"{density.width}x{density.height} density map"
        )
    roi_values = density.values[rect.y0:rect.y1, rect.x0:rect.x1]
    return np.bincount(grid.labels().ravel(), weights=roi_values.ravel(), minlength=grid.J)


def gaussian_density(
    width: int,
    height: int,
    centers: Sequence[Tuple[float, float]],
    sigma: float,
    truncate: float = settings.gaussian_truncate,
) -> DensityMap:
    """
    Sum of 2D Gaussian kernels, one per center.

    Each kernel is cut at `truncate` sigmas and renormalized over the pixels
    that remain inside the frame, so every center contributes exactly one
    vehicle even at a corner.
    """
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    values = np.zeros((height, width), dtype=np.float64)
    radius = truncate * sigma
    for cx, cy in centers:
        if not (0 <= cx <= width and 0 <= cy <= height):
            raise ValueError(f"center ({cx}, {cy}) lies outside the frame")
        x0 = max(int(np.floor(cx - radius)), 0)
        x1 = min(int(np.ceil(cx + radius)) + 1, width)
        y0 = max(int(np.floor(cy - radius)), 0)
        y1 = min(int(np.ceil(cy + radius)) + 1, height)
        # pixel centers sit at integer + 0.5
        xs = np.arange(x0, x1) + 0.5 - cx
        ys = np.arange(y0, y1) + 0.5 - cy
        kernel = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma**2))
        kernel[ys[:, None] ** 2 + xs[None, :] ** 2 > radius**2] = 0.0
        mass = kernel.sum()
        if mass <= 0:
            # sub-pixel sigma far from any pixel center: put the vehicle on the nearest pixel
            px = min(max(int(cx), 0), width - 1)
            py = min(max(int(cy), 0), height - 1)
            values[py, px] += 1.0
            continue
        values[y0:y1, x0:x1] += kernel / mass
    return DensityMap(width=width, height=height, values=values)


def density_from_annotation(
    annotation: Annotation,
    width: int,
    height: int,
    method: Literal["box", "gaussian"] = "box",
    sigma: float = 4.0,
) -> DensityMap:
    """Ground-truth map of one annotated frame."""
    if method == "box":
        return box_density(width, height, annotation.boxes)
    if method == "gaussian":
        centers = [box.center for box in annotation.boxes]
        return gaussian_density(width, height, centers, sigma)
    raise ConfigError(f"unknown ground-truth method {method!r}")


def ground_truth_blocks(
    annotations: Sequence[Annotation],
    width: int,
    height: int,
    grid: BlockGrid,
    method: Literal["box", "gaussian"] = "box",
    sigma: float = 4.0,
) -> np.ndarray:
    """Block density targets of a dataset, shape (N, J)."""
    targets = np.zeros((len(annotations), grid.J), dtype=np.float64)
    for i, annotation in enumerate(annotations):
        density = density_from_annotation(annotation, width, height, method, sigma)
        targets[i] = block_density(density, grid)
    logger.debug(f"Built block targets for {len(annotations)} frames, J={grid.J}")
    return targets
