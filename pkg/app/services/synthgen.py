"""Deterministic synthetic traffic scenes with perspective-scaled vehicles."""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.exceptions import ConfigError
from app.models import Annotation, ArrayModel, BBox, Frame, Roi, SceneConfig
from app.services.rng import XorShift64Star, counter_normals, derive_key
from app.services.storage_service import storage_service

logger = logging.getLogger(__name__)

# stream tags mixed into the per-frame keys
_PLACEMENT_TAG = 1
_NOISE_TAG = 2
_MARKING_BOOST = 60


class SyntheticScene(ArrayModel):
    """Frames, annotations and the clean background of one generated scene."""
    config: SceneConfig
    background: Frame
    frames: Tuple[Frame, ...]
    annotations: Tuple[Annotation, ...]
    roi: Roi

    @property
    def vehicles_total(self) -> int:
        return sum(len(a.boxes) for a in self.annotations)


def _adjust_lane(
    boxes: Sequence[BBox],
    max_iou: float,
    top: int,
    resize: Optional[Callable[[BBox], BBox]] = None,
) -> List[Optional[BBox]]:
    """
    Adjusted box for each input (None when dropped), aligned with the input order.

    `resize` maps a shifted box to the vehicle drawn at its new bottom row.
    """
    adjusted: List[Optional[BBox]] = [None] * len(boxes)
    placed: List[BBox] = []
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].y1, boxes[i].x0, i))
    for i in order:
        candidate = boxes[i]
        while any(candidate.iou(other) > max_iou for other in placed):
            candidate = candidate.shifted(dy=-1)
            if resize is not None:
                candidate = resize(candidate)
            if candidate.y0 < top:
                candidate = None
                break
        if candidate is not None:
            placed.append(candidate)
            adjusted[i] = candidate
    return adjusted


def overlap_policy(boxes: Sequence[BBox], max_iou: float = settings.max_iou, top: int = 0) -> List[BBox]:
    """
    Shift boxes of one lane toward the horizon until every pairwise IoU is at most max_iou.

    Boxes are placed nearest first (largest bottom edge); each later box moves
    up one row at a time. A box that would cross `top` is dropped.
    """
    return [box for box in _adjust_lane(boxes, max_iou, top) if box is not None]


class SceneGenerator:
    """Renders rectangles on a road background; the annotations are the drawn boxes."""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or settings.max_workers

    def scale_at(self, cfg: SceneConfig, bottom_row: int) -> float:
        """far_scale at the horizon row, near_scale at the bottom row, linear between."""
        span = cfg.height - 1 - cfg.horizon_row
        if span == 0:
            return cfg.near_scale
        frac = (bottom_row - cfg.horizon_row) / span
        return cfg.far_scale + (cfg.near_scale - cfg.far_scale) * frac

    def vehicle_size(self, cfg: SceneConfig, bottom_row: int) -> Tuple[int, int]:
        s = self.scale_at(cfg, bottom_row)
        bw, bh = cfg.base_vehicle
        return max(1, round(bw * s)), max(1, round(bh * s))

    def lane_width(self, cfg: SceneConfig) -> int:
        return cfg.width // cfg.n_lanes

    def vehicle_box(self, cfg: SceneConfig, lane: int, bottom_row: int) -> BBox:
        """Box of a vehicle centred in `lane` whose bottom edge sits on `bottom_row`."""
        w, h = self.vehicle_size(cfg, bottom_row)
        x0 = lane * self.lane_width(cfg) + (self.lane_width(cfg) - w) // 2
        return BBox(x0=x0, y0=bottom_row - h + 1, x1=x0 + w, y1=bottom_row + 1)

    def valid_rows(self, cfg: SceneConfig) -> List[int]:
        """Bottom rows at which a vehicle fits between the horizon and the frame bottom."""
        rows = []
        for y in range(cfg.horizon_row, cfg.height):
            _, h = self.vehicle_size(cfg, y)
            if y - h + 1 >= cfg.horizon_row:
                rows.append(y)
        return rows

    def render_background(self, cfg: SceneConfig) -> np.ndarray:
        img = np.full((cfg.height, cfg.width), cfg.intensity_bg, dtype=np.uint8)
        if cfg.lane_markings and cfg.n_lanes > 1:
            lane_w = self.lane_width(cfg)
            marking = min(255, cfg.intensity_bg + _MARKING_BOOST)
            rows = np.arange(cfg.horizon_row, cfg.height)
            dashed = rows[((rows - cfg.horizon_row) // 4) % 2 == 0]
            for lane in range(1, cfg.n_lanes):
                img[dashed, lane * lane_w] = marking
        return img

    def place_vehicles(self, cfg: SceneConfig, rng: XorShift64Star, rows: List[int]) -> List[Tuple[BBox, int]]:
        """Draw the count, lanes, rows and intensities; return (box, intensity) pairs far-to-near."""
        lo, hi = cfg.intensity_fg_range
        per_lane: List[List[Tuple[BBox, int]]] = [[] for _ in range(cfg.n_lanes)]
        for _ in range(rng.poisson(cfg.arrival_rate)):
            lane = rng.randbelow(cfg.n_lanes)
            y = rows[rng.randbelow(len(rows))]
            intensity = rng.randint(lo, hi)
            per_lane[lane].append((self.vehicle_box(cfg, lane, y), intensity))

        vehicles = []
        for lane, lane_vehicles in enumerate(per_lane):
            adjusted = _adjust_lane(
                [box for box, _ in lane_vehicles],
                cfg.max_iou,
                cfg.horizon_row,
                resize=lambda box, lane=lane: self.vehicle_box(cfg, lane, box.y1 - 1),
            )
            vehicles.extend(
                (box, intensity)
                for box, (_, intensity) in zip(adjusted, lane_vehicles)
                if box is not None
            )
        # painter's order: far vehicles first so nearer ones occlude them
        vehicles.sort(key=lambda v: (v[0].y1, v[0].x0))
        return vehicles

    def generate_frame(self, cfg: SceneConfig, index: int, background: np.ndarray,
                       rows: List[int]) -> Tuple[Frame, Annotation]:
        rng = XorShift64Star(derive_key(cfg.seed, index, _PLACEMENT_TAG))
        vehicles = self.place_vehicles(cfg, rng, rows)

        canvas = background.astype(np.int32)
        for box, intensity in vehicles:
            canvas[box.y0:box.y1, box.x0:box.x1] = intensity
        if cfg.noise_sigma > 0:
            key = derive_key(cfg.seed, index, _NOISE_TAG)
            noise = counter_normals(key, 0, canvas.size).reshape(canvas.shape)
            canvas = canvas + np.rint(noise * cfg.noise_sigma).astype(np.int32)
        pixels = np.clip(canvas, 0, 255).astype(np.uint8)

        frame_id = f"{index:06d}"
        frame = Frame(width=cfg.width, height=cfg.height, pixels=pixels)
        return frame, Annotation(frame_id=frame_id, boxes=tuple(box for box, _ in vehicles))

    def generate(self, cfg: SceneConfig) -> SyntheticScene:
        """Generate every frame of a scene; frame i depends only on (seed, i)."""
        rows = self.valid_rows(cfg)
        w, h = self.vehicle_size(cfg, cfg.height - 1)
        if not rows or w > self.lane_width(cfg):
            raise ConfigError(
                f"vehicle too large for frame at requested scale: {w}x{h} at the bottom row "
                f"does not fit a {self.lane_width(cfg)}-pixel lane below row {cfg.horizon_row}"
            )
        background = self.render_background(cfg)
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            results = list(pool.map(
                lambda i: self.generate_frame(cfg, i, background, rows),
                range(cfg.n_frames),
            ))
        scene = SyntheticScene(
            config=cfg,
            background=Frame(width=cfg.width, height=cfg.height, pixels=background),
            frames=tuple(frame for frame, _ in results),
            annotations=tuple(annotation for _, annotation in results),
            roi=Roi(rect=cfg.roi_rect, region_length=cfg.region_length),
        )
        logger.info(f"Generated {cfg.n_frames} frames with {scene.vehicles_total} vehicles")
        return scene

    def write(self, scene: SyntheticScene, out_dir: Path) -> Path:
        return storage_service.write_dataset(
            out_dir,
            scene.background,
            scene.frames,
            scene.annotations,
            scene.roi,
            scene_hash=scene.config.config_hash(),
        )


# Global instance
scene_generator = SceneGenerator()
