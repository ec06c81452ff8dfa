import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usjepa import frames as F


def sorted_percentile(values, q):
    """Linear-interpolation percentile computed from a sorted copy."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    pos = q / 100 * (len(v) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


# -- grayscale ------------------------------------------------------------------


def test_grayscale_equal_channels_identity():
    g = np.random.default_rng(0).random((5, 7))
    np.testing.assert_allclose(F.to_grayscale(np.stack([g, g, g], -1)), g, atol=1e-15)


def test_grayscale_black_and_red():
    assert np.all(F.to_grayscale(np.zeros((3, 3, 3))) == 0)
    red = np.zeros((1, 1, 3))
    red[..., 0] = 1
    assert F.to_grayscale(red)[0, 0] == pytest.approx(0.299)


def test_grayscale_rejects_wrong_channels():
    with pytest.raises(ValueError):
        F.to_grayscale(np.zeros((4, 4, 2)))


# -- inpainting -----------------------------------------------------------------


def test_inpaint_empty_mask_is_identity():
    f = np.random.default_rng(1).random((16, 16))
    np.testing.assert_array_equal(F.inpaint_artifacts(f, np.zeros_like(f, bool)), f)


def test_inpaint_single_pixel_in_constant_field():
    f = np.full((9, 9), 0.37)
    f[4, 4] = 1.0
    m = np.zeros_like(f, bool)
    m[4, 4] = True
    out = F.inpaint_artifacts(f, m)
    assert out[4, 4] == pytest.approx(0.37, abs=1e-4)


def test_inpaint_large_mask_passes_through(caplog):
    f = np.random.default_rng(2).random((50, 50))
    m = np.zeros_like(f, bool)
    m[:6, :25] = True  # 150 / 2500 = 6%
    with caplog.at_level(logging.INFO):
        out = F.inpaint_artifacts(f, m)
    np.testing.assert_array_equal(out, f)
    assert "passed through" in caplog.text


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_inpaint_leaves_unmasked_pixels_bit_identical(seed):
    rng = np.random.default_rng(seed)
    f = rng.random((20, 20))
    m = rng.random((20, 20)) < 0.03
    out = F.inpaint_artifacts(f, m)
    np.testing.assert_array_equal(out[~m], f[~m])
    assert np.all((out >= f.min() - 1e-12) & (out <= f.max() + 1e-12))


# -- percentile rescale ------------------------------------------------------------


def test_rescale_uniform_region_against_sort_oracle():
    rng = np.random.default_rng(3)
    f = rng.random((40, 40))
    region = np.ones_like(f, bool)
    region[:5] = False
    out = F.percentile_rescale(f, region)
    p2, p98 = sorted_percentile(f[region], 2), sorted_percentile(f[region], 98)
    expect = np.clip((f - p2) / (p98 - p2), 0, 1)
    np.testing.assert_allclose(out[region], expect[region], atol=1e-12)
    assert np.all(out[~region] == 0)


def test_rescale_constant_region_degenerate():
    f = np.full((10, 10), 0.4)
    assert np.all(F.percentile_rescale(f, np.ones_like(f, bool)) == 0)


def test_rescale_two_values():
    f = np.where(np.arange(100).reshape(10, 10) % 2 == 0, 0.2, 0.8)
    out = F.percentile_rescale(f, np.ones_like(f, bool))
    assert set(np.unique(out).tolist()) == {0.0, 1.0}
    assert np.all(out[f == 0.2] == 0) and np.all(out[f == 0.8] == 1)


def test_rescale_small_region_passes_through():
    f = np.random.default_rng(4).random((10, 10))
    region = np.zeros_like(f, bool)
    region[0, :10] = True
    np.testing.assert_array_equal(F.percentile_rescale(f, region), f)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rescale_monotone_in_region(seed):
    rng = np.random.default_rng(seed)
    f = rng.random((12, 12))
    out = F.percentile_rescale(f, np.ones_like(f, bool))
    order = np.argsort(f.ravel(), kind="stable")
    assert np.all(np.diff(out.ravel()[order]) >= 0)


# -- region mask ---------------------------------------------------------------------


def test_region_of_bright_rectangle():
    f = np.zeros((60, 80))
    f[10:50, 15:70] = 0.6
    m = F.extract_region_mask(f)
    np.testing.assert_array_equal(m, f > 0)


def test_region_of_black_frame_raises():
    with pytest.raises(F.EmptyRegionError):
        F.extract_region_mask(np.zeros((32, 32)))


def test_region_iou_on_synthetic_fans():
    ious = []
    for seed in range(40):
        frame, region, _ = F.synth_frame(seed % 3, seed, size=96)
        m = F.extract_region_mask(frame)
        ious.append((m & region).sum() / (m | region).sum())
    assert min(ious) >= 0.95


def test_region_extraction_idempotent():
    frame, _, _ = F.synth_frame(1, 5, size=64)
    a = F.extract_region_mask(frame)
    b = F.extract_region_mask(frame)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(F.extract_region_mask(a.astype(float)), a)


# -- synthetic generator ----------------------------------------------------------------


def test_synth_is_deterministic():
    a = F.synth_frame(2, 99)
    b = F.synth_frame(2, 99)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes() and a[2] == b[2] == 2


@pytest.mark.parametrize("other", [1, 2])
def test_classes_differ_only_inside_footprint(other):
    for seed in range(10):
        f0, r0, _ = F.synth_frame(0, seed)
        f1, r1, _ = F.synth_frame(other, seed)
        foot = F.inclusion_footprint(seed)
        np.testing.assert_array_equal(r0, r1)
        np.testing.assert_array_equal(f0[~foot], f1[~foot])
        assert np.any(f0[foot] != f1[foot])


def test_thousand_frames_in_range_with_regions():
    for seed in range(1000):
        f, r, label = F.synth_frame(seed % 3, seed, size=32)
        assert f.min() >= 0 and f.max() <= 1 and r.any() and label == seed % 3
        assert np.all(f[~r] == 0)


def test_synth_rejects_bad_class():
    with pytest.raises(ValueError):
        F.synth_frame(3, 0, n_classes=3)


# -- pipeline and I/O ---------------------------------------------------------------------


def test_raster_and_mask_roundtrip(tmp_path):
    f, r, _ = F.synth_frame(0, 1)
    F.write_raster(tmp_path / "a" / "f.png", f)
    F.write_mask(tmp_path / "a" / "f.mask.png", r)
    back = F.read_raster(tmp_path / "a" / "f.png")
    assert np.abs(back - f).max() <= 0.5 / 255 + 1e-12
    np.testing.assert_array_equal(F.read_mask(tmp_path / "a" / "f.mask.png"), r)
    assert F.mask_path_for("x/y.png").name == "y.mask.png"


def test_preprocess_rgb_with_overlay():
    f, r, _ = F.synth_frame(0, 3, size=96)
    rgb = np.stack([f, f, f], -1)
    rgb[5:8, 40:60] = [1.0, 1.0, 0.0]  # coloured caption in the dark border
    out, region = F.preprocess(rgb, 64)
    assert out.shape == region.shape == (64, 64)
    assert out.min() >= 0 and out.max() <= 1
    assert np.all(out[~region] == 0) or region.mean() > 0.2
