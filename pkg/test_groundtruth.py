"""Tests for ground-truth density maps and block densities."""
import numpy as np
import pytest

from app.exceptions import ConfigError, ShapeMismatchError
from app.models import Annotation, BBox, BlockGrid, DensityMap, Roi
from app.services.groundtruth import (
    block_density,
    box_density,
    density_from_annotation,
    gaussian_density,
    ground_truth_blocks,
)


def _random_boxes(rng, width, height, n):
    boxes = []
    for _ in range(n):
        x0 = int(rng.integers(0, width - 1))
        y0 = int(rng.integers(0, height - 1))
        x1 = int(rng.integers(x0 + 1, width + 1))
        y1 = int(rng.integers(y0 + 1, height + 1))
        boxes.append(BBox(x0=x0, y0=y0, x1=x1, y1=y1))
    return boxes


def test_box_density_conserves_count():
    rng = np.random.default_rng(42)
    width, height = 64, 48
    for _ in range(1000):
        n = int(rng.integers(0, 31))
        density = box_density(width, height, _random_boxes(rng, width, height, n))
        assert abs(density.total() - n) <= n * 1e-9


def test_single_box_is_uniform():
    density = box_density(10, 10, [BBox(x0=2, y0=3, x1=6, y1=5)])
    assert density.values[3:5, 2:6] == pytest.approx(np.full((2, 4), 1 / 8))
    assert density.values.sum() == pytest.approx(1.0)
    assert density.values[0, 0] == 0.0


def test_clipped_box_keeps_original_area():
    density = box_density(20, 20, [BBox(x0=-5, y0=0, x1=5, y1=10)])
    assert density.total() == pytest.approx(0.5)
    assert density.values[0, 0] == pytest.approx(1 / 100)


def test_box_outside_frame():
    with pytest.raises(ValueError):
        box_density(10, 10, [BBox(x0=20, y0=20, x1=25, y1=25)])


def test_empty_frame_has_zero_density():
    assert box_density(8, 8, []).total() == 0.0


def test_block_density_sums_to_roi_mass():
    rng = np.random.default_rng(7)
    density = box_density(50, 40, _random_boxes(rng, 50, 40, 12))
    roi = Roi(rect=BBox(x0=5, y0=8, x1=50, y1=40), region_length=10.0)
    grid = BlockGrid.from_roi(roi, 16, 16)
    blocks = block_density(density, grid)
    assert blocks.shape == (grid.J,)
    assert blocks.sum() == pytest.approx(density.values[8:40, 5:50].sum(), rel=1e-12)
    first = grid.block_rect(0)
    assert blocks[0] == pytest.approx(density.values[first.y0:first.y1, first.x0:first.x1].sum())


def test_block_density_whole_frame_matches_total():
    density = box_density(32, 32, [BBox(x0=4, y0=4, x1=20, y1=12), BBox(x0=10, y0=20, x1=30, y1=30)])
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=0, y0=0, x1=32, y1=32), region_length=1.0), 8, 8)
    assert block_density(density, grid).sum() == pytest.approx(2.0)


def test_block_density_is_linear():
    rng = np.random.default_rng(17)
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=3, y0=2, x1=45, y1=36), region_length=1.0), 10, 8)
    for _ in range(100):
        first = rng.uniform(0.0, 1.0, (36, 45))
        second = rng.uniform(0.0, 1.0, (36, 45))
        a, b = rng.uniform(0.0, 5.0, size=2)
        combined = block_density(DensityMap(width=45, height=36, values=a * first + b * second), grid)
        parts = (a * block_density(DensityMap(width=45, height=36, values=first), grid)
                 + b * block_density(DensityMap(width=45, height=36, values=second), grid))
        assert np.allclose(combined, parts, rtol=1e-12, atol=1e-12)


def test_box_density_follows_translation():
    rng = np.random.default_rng(23)
    width, height = 64, 48
    for _ in range(100):
        dx, dy = (int(v) for v in rng.integers(1, 8, size=2))
        boxes = _random_boxes(rng, width - dx, height - dy, int(rng.integers(1, 10)))
        original = box_density(width, height, boxes).values
        moved = box_density(width, height, [box.shifted(dx=dx, dy=dy) for box in boxes]).values
        assert np.array_equal(moved[dy:, dx:], original[:-dy, :-dx])
        assert not moved[:dy].any()
        assert not moved[:, :dx].any()


def test_grid_outside_density_map():
    density = DensityMap(width=10, height=10, values=np.zeros((10, 10)))
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=0, y0=0, x1=20, y1=10), region_length=1.0), 5, 5)
    with pytest.raises(ShapeMismatchError):
        block_density(density, grid)


def test_gaussian_density_integrates_to_one():
    density = gaussian_density(40, 40, [(20.0, 20.0)], sigma=2.0)
    assert density.total() == pytest.approx(1.0, abs=1e-12)
    peak = np.unravel_index(np.argmax(density.values), density.values.shape)
    assert peak in {(19, 19), (19, 20), (20, 19), (20, 20)}


def test_gaussian_density_corner_is_renormalized():
    density = gaussian_density(30, 30, [(0.0, 0.0), (29.5, 29.5)], sigma=3.0)
    assert density.total() == pytest.approx(2.0, abs=1e-12)


def test_gaussian_density_rejects_bad_sigma():
    with pytest.raises(ConfigError):
        gaussian_density(10, 10, [(5.0, 5.0)], sigma=0.0)


def test_density_from_annotation_methods_agree_on_count():
    annotation = Annotation(frame_id="a", boxes=(BBox(x0=2, y0=2, x1=10, y1=8), BBox(x0=20, y0=10, x1=28, y1=20)))
    box = density_from_annotation(annotation, 32, 32, "box")
    gauss = density_from_annotation(annotation, 32, 32, "gaussian", sigma=1.5)
    assert box.total() == pytest.approx(2.0)
    assert gauss.total() == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        density_from_annotation(annotation, 32, 32, "points")


def test_ground_truth_blocks_shape():
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=0, y0=8, x1=32, y1=32), region_length=1.0), 8, 8)
    annotations = [
        Annotation(frame_id="a"),
        Annotation(frame_id="b", boxes=(BBox(x0=0, y0=8, x1=8, y1=16),)),
    ]
    targets = ground_truth_blocks(annotations, 32, 32, grid)
    assert targets.shape == (2, grid.J)
    assert targets[0].sum() == 0.0
    assert targets[1, 0] == pytest.approx(1.0)
    assert targets[1, 1:].sum() == 0.0
