"""Tests for background subtraction and block features."""
import numpy as np
import pytest

from app.exceptions import ShapeMismatchError
from app.models import BBox, BlockGrid, FeatureConfig, FgMask, Frame, Roi
from app.services.feature_extractor import FeatureExtractor, _gradients


@pytest.fixture
def extractor():
    return FeatureExtractor(max_workers=2)


@pytest.fixture
def scene():
    """32x32 background at 90 with a bright 16x16 patch in the top-left block."""
    background = Frame(width=32, height=32, pixels=np.full((32, 32), 90))
    pixels = np.full((32, 32), 90)
    pixels[0:16, 0:16] = 200
    frame = Frame(width=32, height=32, pixels=pixels)
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=0, y0=0, x1=32, y1=32), region_length=1.0), 16, 16)
    return frame, background, grid


def test_background_subtract_threshold(extractor, scene):
    frame, background, _ = scene
    mask = extractor.background_subtract(frame, background, threshold=25)
    assert mask.bits[0:16, 0:16].all()
    assert mask.bits.sum() == 256
    assert not extractor.background_subtract(background, background, threshold=25).bits.any()


def test_background_subtract_is_strict(extractor):
    background = Frame(width=2, height=1, pixels=[[100, 100]])
    frame = Frame(width=2, height=1, pixels=[[125, 126]])
    assert extractor.background_subtract(frame, background, threshold=25).bits.tolist() == [[False, True]]


def test_background_subtract_darker_vehicles(extractor):
    background = Frame(width=2, height=1, pixels=[[100, 100]])
    frame = Frame(width=2, height=1, pixels=[[10, 100]])
    assert extractor.background_subtract(frame, background, threshold=25).bits.tolist() == [[True, False]]


def test_background_subtract_size_mismatch(extractor, scene):
    frame, _, _ = scene
    with pytest.raises(ShapeMismatchError):
        extractor.background_subtract(frame, Frame(width=8, height=8, pixels=np.zeros((8, 8))))


def test_block_features_layout(extractor, scene):
    frame, background, grid = scene
    cfg = FeatureConfig()
    mask = extractor.background_subtract(frame, background, threshold=25)
    features = extractor.extract_block_features(frame, mask, grid, cfg).data
    assert features.shape == (grid.J, cfg.K)

    intensity = features[:, :8]
    orient = features[:, 8:16]
    fg_ratio = features[:, 16]
    bias = features[:, 17]

    # 200 falls in bin (200 * 8) // 256 = 6
    assert intensity[0].tolist() == [0, 0, 0, 0, 0, 0, 1.0, 0]
    assert orient[0].sum() == pytest.approx(1.0)
    assert fg_ratio.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert bias.tolist() == [1.0, 1.0, 1.0, 1.0]
    # blocks without foreground have all-zero histograms
    assert not intensity[1:].any()
    assert not orient[1:].any()


def test_optional_features_change_k(extractor, scene):
    frame, background, grid = scene
    cfg = FeatureConfig(intensity_bins=4, orient_bins=6, include_fg_ratio=False, include_bias=False)
    stack = extractor.extract_frame(frame, background, grid, cfg, threshold=25)
    assert stack.shape == (4, 10)
    assert stack[0, :4].tolist() == [0, 0, 0, 1.0]


def test_ragged_blocks_use_their_own_size(extractor):
    background = Frame(width=20, height=16, pixels=np.zeros((16, 20)))
    frame = Frame(width=20, height=16, pixels=np.full((16, 20), 200))
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=0, y0=0, x1=20, y1=16), region_length=1.0), 16, 16)
    stack = extractor.extract_frame(frame, background, grid, FeatureConfig(), threshold=25)
    assert stack[:, 16].tolist() == [1.0, 1.0]


def test_extract_dataset_preserves_order(extractor, scene):
    frame, background, grid = scene
    cfg = FeatureConfig()
    frames = [frame, background, frame]
    stack = extractor.extract_dataset(frames, background, grid, cfg, threshold=25)
    assert stack.shape == (3, grid.J, cfg.K)
    for i, f in enumerate(frames):
        assert np.array_equal(stack[i], extractor.extract_frame(f, background, grid, cfg, threshold=25))
    assert stack[1, :, 16].sum() == 0.0


def test_extract_dataset_empty(extractor, scene):
    _, background, grid = scene
    assert extractor.extract_dataset([], background, grid, FeatureConfig()).shape == (0, grid.J, 18)


def test_gradients_on_single_row():
    gy, gx = _gradients(np.array([[0.0, 2.0, 4.0]]))
    assert gy.tolist() == [[0.0, 0.0, 0.0]]
    assert gx.tolist() == [[2.0, 2.0, 2.0]]


def test_background_only_frame_has_empty_histograms(extractor):
    background = Frame(width=32, height=32, pixels=np.full((32, 32), 128))
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=0, y0=0, x1=32, y1=32), region_length=1.0), 16, 16)
    stack = extractor.extract_frame(background, background, grid, FeatureConfig(), threshold=25)
    assert stack.dtype == np.float64
    assert stack.shape == (4, 18)
    for row in stack:
        assert row.tolist() == [0.0] * 16 + [0.0, 1.0]


def _random_scene(rng, width=40, height=28):
    background = Frame(width=width, height=height, pixels=rng.integers(0, 256, (height, width)))
    frame = Frame(width=width, height=height, pixels=rng.integers(0, 256, (height, width)))
    grid = BlockGrid.from_roi(Roi(rect=BBox(x0=0, y0=0, x1=width, y1=height), region_length=1.0), 16, 12)
    return frame, background, grid


def test_random_frames_give_bounded_finite_features(extractor):
    rng = np.random.default_rng(12)
    for _ in range(50):
        frame, background, grid = _random_scene(rng)
        threshold = int(rng.integers(1, 255))
        stack = extractor.extract_frame(frame, background, grid, FeatureConfig(), threshold=threshold)
        assert np.isfinite(stack).all()
        assert stack.min() >= 0.0
        assert stack.max() <= 1.0


def test_features_are_bitwise_reproducible():
    rng = np.random.default_rng(21)
    scenes = [_random_scene(rng) for _ in range(6)]
    background, grid = scenes[0][1], scenes[0][2]
    frames = [frame for frame, _, _ in scenes]
    cfg = FeatureConfig()
    reference = FeatureExtractor(max_workers=1).extract_dataset(frames, background, grid, cfg, threshold=30)
    for workers in (1, 2, 4):
        for _ in range(2):
            again = FeatureExtractor(max_workers=workers).extract_dataset(frames, background, grid, cfg, threshold=30)
            assert again.tobytes() == reference.tobytes()


def test_fg_ratio_grows_with_the_mask(extractor):
    rng = np.random.default_rng(4)
    frame, _, grid = _random_scene(rng)
    cfg = FeatureConfig()
    for _ in range(20):
        bits = rng.random((frame.height, frame.width)) < 0.3
        extra = rng.random((frame.height, frame.width)) < 0.2
        small = extractor.extract_block_features(
            frame, FgMask(width=frame.width, height=frame.height, bits=bits), grid, cfg).data
        large = extractor.extract_block_features(
            frame, FgMask(width=frame.width, height=frame.height, bits=bits | extra), grid, cfg).data
        assert (large[:, 16] >= small[:, 16]).all()
