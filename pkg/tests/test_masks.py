import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regionnorm.errors import ShapeError
from regionnorm.masks import (
    COVERAGE_INTERVALS,
    MaskSpec,
    RegionMask,
    downsample_mask,
    irregular_stroke_mask,
    load_mask,
    regular_square_mask,
    save_grayscale,
    save_mask,
)


# ---------------------------------------------------------------------------
# regular masks


def test_regular_mask_4x4():
    mask = regular_square_mask(4, 4)
    expected = np.ones((4, 4), dtype=np.uint8)
    expected[1:3, 1:3] = 0
    npt.assert_array_equal(mask.bits, expected)
    assert mask.coverage_ratio == 0.25


def test_regular_mask_256():
    mask = regular_square_mask(256, 256)
    assert mask.hole_count() == 128 * 128
    hole_rows = np.where((mask.bits == 0).any(axis=1))[0]
    assert hole_rows.min() == 64 and hole_rows.max() == 191


def test_regular_mask_odd_dims_rejected():
    with pytest.raises(ShapeError):
        regular_square_mask(5, 4)
    with pytest.raises(ShapeError):
        regular_square_mask(4, 7)


@given(h=st.integers(1, 64).map(lambda v: 2 * v), w=st.integers(1, 64).map(lambda v: 2 * v))
@settings(max_examples=40, deadline=None)
def test_regular_mask_quarter_coverage(h, w):
    assert regular_square_mask(h, w).coverage_ratio == 0.25


# ---------------------------------------------------------------------------
# irregular masks


def test_irregular_degenerate_interval():
    spec = MaskSpec(kind="irregular", coverage_interval=(0.0, 0.0001), seed=1)
    mask = irregular_stroke_mask(256, 256, spec)
    assert mask.coverage_ratio < 0.0001


def test_irregular_hits_requested_interval():
    spec = MaskSpec(kind="irregular", coverage_interval=(0.2, 0.3), seed=5)
    mask = irregular_stroke_mask(64, 64, spec)
    assert 0.2 <= mask.coverage_ratio <= 0.3


def test_irregular_deterministic_under_seed():
    spec = MaskSpec(kind="irregular", coverage_interval=(0.2, 0.3), seed=9)
    a = irregular_stroke_mask(64, 64, spec)
    b = irregular_stroke_mask(64, 64, spec)
    npt.assert_array_equal(a.bits, b.bits)


@pytest.mark.parametrize("interval", COVERAGE_INTERVALS)
def test_irregular_all_table_intervals(interval):
    spec = MaskSpec(kind="irregular", coverage_interval=interval, seed=3)
    mask = irregular_stroke_mask(64, 64, spec)
    assert interval[0] <= mask.coverage_ratio <= interval[1]


def test_coverage_monotonicity_harness():
    # mean coverage over the five 10%-wide sweep intervals must increase
    sweep = COVERAGE_INTERVALS[1:]
    means = []
    for idx, interval in enumerate(sweep):
        ratios = [
            irregular_stroke_mask(
                64, 64, MaskSpec(kind="irregular", coverage_interval=interval, seed=100 + idx * 17 + k)
            ).coverage_ratio
            for k in range(8)
        ]
        means.append(np.mean(ratios))
    assert all(a < b for a, b in zip(means, means[1:]))


def test_mask_spec_validation():
    with pytest.raises(ValueError):
        MaskSpec(kind="irregular", coverage_interval=(0.3, 0.2))
    with pytest.raises(ValueError):
        MaskSpec(kind="blob", coverage_interval=(0.1, 0.2))


# ---------------------------------------------------------------------------
# downsampling


def test_downsample_identity():
    mask = regular_square_mask(8, 8)
    npt.assert_array_equal(downsample_mask(mask, 1).bits, mask.bits)


def test_downsample_all_ones():
    mask = RegionMask.from_bits(np.ones((8, 8), dtype=np.uint8))
    npt.assert_array_equal(downsample_mask(mask, 4).bits, np.ones((2, 2), dtype=np.uint8))


def test_downsample_top_left_block():
    bits = np.ones((4, 4), dtype=np.uint8)
    bits[:2, :2] = 0
    out = downsample_mask(RegionMask.from_bits(bits), 2)
    npt.assert_array_equal(out.bits, [[0, 1], [1, 1]])


def test_downsample_non_divisible_factor():
    with pytest.raises(ShapeError):
        downsample_mask(regular_square_mask(8, 8), 3)


@given(st.integers(0, 2**16 - 1))
@settings(max_examples=25, deadline=None)
def test_downsample_composition(seed):
    rng = np.random.default_rng(seed)
    bits = (rng.random((16, 16)) > 0.5).astype(np.uint8)
    mask = RegionMask.from_bits(bits)
    two_step = downsample_mask(downsample_mask(mask, 2), 4)
    one_step = downsample_mask(mask, 8)
    npt.assert_array_equal(two_step.bits, one_step.bits)


@given(st.integers(0, 2**16 - 1))
@settings(max_examples=25, deadline=None)
def test_binary_closure(seed):
    rng = np.random.default_rng(seed)
    spec = MaskSpec(kind="irregular", coverage_interval=(0.1, 0.5), seed=seed)
    mask = irregular_stroke_mask(32, 32, spec, rng)
    assert set(np.unique(mask.bits)) <= {0, 1}
    down = downsample_mask(mask, 2)
    assert set(np.unique(down.bits)) <= {0, 1}


# ---------------------------------------------------------------------------
# PNG I/O


def test_png_round_trip(tmp_path):
    spec = MaskSpec(kind="irregular", coverage_interval=(0.2, 0.4), seed=2)
    mask = irregular_stroke_mask(48, 48, spec)
    path = tmp_path / "mask.png"
    save_mask(mask, path)
    npt.assert_array_equal(load_mask(path).bits, mask.bits)


def test_png_all_white_loads_as_ones(tmp_path):
    from PIL import Image

    path = tmp_path / "white.png"
    Image.fromarray(np.full((8, 8), 255, dtype=np.uint8), mode="L").save(path)
    assert load_mask(path).coverage_ratio == 0.0


def test_png_threshold_boundary(tmp_path):
    from PIL import Image

    arr = np.array([[127, 128]], dtype=np.uint8)
    path = tmp_path / "edge.png"
    Image.fromarray(arr, mode="L").save(path)
    npt.assert_array_equal(load_mask(path).bits, [[0, 1]])


def test_grayscale_dump(tmp_path):
    from PIL import Image

    path = tmp_path / "resp.png"
    save_grayscale(np.linspace(0, 1, 16).reshape(4, 4), path)
    with Image.open(path) as img:
        arr = np.asarray(img)
    assert arr.shape == (4, 4)
    assert arr[0, 0] == 0 and arr[-1, -1] == 255
