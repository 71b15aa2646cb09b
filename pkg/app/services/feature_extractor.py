"""Background subtraction and block feature extraction."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

import numpy as np

from app.config import settings
from app.exceptions import ShapeMismatchError
from app.models import BlockGrid, FeatureConfig, FeatureMatrix, FgMask, Frame

logger = logging.getLogger(__name__)


class FeatureExtractor:
    """Turns frames into per-block feature vectors for the block regressors."""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or settings.max_workers

    def background_subtract(
        self,
        frame: Frame,
        background: Frame,
        threshold: int = settings.fg_threshold,
    ) -> FgMask:
        """Foreground where |frame - background| > threshold."""
        if (frame.width, frame.height) != (background.width, background.height):
            raise ShapeMismatchError(
                f"frame is {frame.width}x{frame.height} but background is "
                f"{background.width}x{background.height}"
            )
        if not 0 < threshold < 255:
            raise ValueError(f"threshold must lie in (0, 255), got {threshold}")
        diff = np.abs(frame.pixels.astype(np.int16) - background.pixels.astype(np.int16))
        return FgMask(width=frame.width, height=frame.height, bits=diff > threshold)

    def extract_block_features(
        self,
        frame: Frame,
        mask: FgMask,
        grid: BlockGrid,
        cfg: FeatureConfig,
    ) -> FeatureMatrix:
        """
        Per-block features, concatenated in this order:
        intensity histogram over foreground pixels (L1-normalized),
        gradient-orientation histogram weighted by magnitude (L1-normalized),
        foreground ratio, and a constant bias.
        """
        if (mask.width, mask.height) != (frame.width, frame.height):
            raise ShapeMismatchError("mask dimensions must match the frame")
        grid.roi.check_within(frame.width, frame.height)
        rect = grid.roi.rect
        J = grid.J
        labels = grid.labels().ravel()

        pixels = frame.pixels.astype(np.float64)
        # central differences inside, one-sided at the frame border
        gy, gx = _gradients(pixels)
        region = (slice(rect.y0, rect.y1), slice(rect.x0, rect.x1))
        fg = mask.bits[region].ravel()
        intensity = frame.pixels[region].ravel()
        magnitude = np.hypot(gx[region], gy[region]).ravel()
        angle = np.mod(np.arctan2(gy[region], gx[region]).ravel(), 2.0 * math.pi)

        parts = []

        ib = cfg.intensity_bins
        ibin = (intensity.astype(np.int64) * ib) // 256
        hist = np.bincount(labels[fg] * ib + ibin[fg], minlength=J * ib).reshape(J, ib)
        parts.append(_l1_normalize(hist.astype(np.float64)))

        ob = cfg.orient_bins
        obin = np.minimum((angle * ob / (2.0 * math.pi)).astype(np.int64), ob - 1)
        voting = fg & (magnitude > 0)
        ohist = np.bincount(
            labels[voting] * ob + obin[voting],
            weights=magnitude[voting],
            minlength=J * ob,
        ).reshape(J, ob)
        parts.append(_l1_normalize(ohist.astype(np.float64)))

        if cfg.include_fg_ratio:
            fg_count = np.bincount(labels, weights=fg.astype(np.float64), minlength=J)
            parts.append((fg_count / grid.block_sizes())[:, None])

        if cfg.include_bias:
            parts.append(np.ones((J, 1)))

        return FeatureMatrix(data=np.hstack(parts))

    def extract_frame(
        self,
        frame: Frame,
        background: Frame,
        grid: BlockGrid,
        cfg: FeatureConfig,
        threshold: int = settings.fg_threshold,
    ) -> np.ndarray:
        mask = self.background_subtract(frame, background, threshold)
        return self.extract_block_features(frame, mask, grid, cfg).data

    def extract_dataset(
        self,
        frames: Sequence[Frame],
        background: Frame,
        grid: BlockGrid,
        cfg: FeatureConfig,
        threshold: int = settings.fg_threshold,
    ) -> np.ndarray:
        """Feature stack of a dataset, shape (N, J, K); frame order is preserved."""
        logger.info(f"Extracting features for {len(frames)} frames (J={grid.J}, K={cfg.K})")
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            rows = list(pool.map(
                lambda frame: self.extract_frame(frame, background, grid, cfg, threshold),
                frames,
            ))
        if not rows:
            return np.zeros((0, grid.J, cfg.K))
        return np.stack(rows)


def _gradients(pixels: np.ndarray):
    """Row and column derivatives; an axis of length one has zero derivative."""
    gy = np.gradient(pixels, axis=0) if pixels.shape[0] > 1 else np.zeros_like(pixels)
    gx = np.gradient(pixels, axis=1) if pixels.shape[1] > 1 else np.zeros_like(pixels)
    return gy, gx


def _l1_normalize(hist: np.ndarray) -> np.ndarray:
    totals = hist.sum(axis=1, keepdims=True)
    return np.divide(hist, totals, out=np.zeros(hist.shape, dtype=np.float64), where=totals > 0)


# Global instance
feature_extractor = FeatureExtractor()
