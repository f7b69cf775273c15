import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from angiomim.image import (ImageFormatError, gaussian_second_derivatives, load_image, load_mask,
                            partition, percentile, reassemble, save_image)


# -- oracles -----------------------------------------------------------------

def analytic_kernels(sigma, extent=4):
    """Gaussian and its second derivative sampled from the closed forms."""
    r = math.ceil(extent * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-x ** 2 / (2 * sigma ** 2)) / (math.sqrt(2 * math.pi) * sigma)
    d2 = (x ** 2 / sigma ** 4 - 1 / sigma ** 2) * g
    return g, d2


def dense_filter(img, kernel2d):
    """Direct double loop over output pixels with reflect padding."""
    r = kernel2d.shape[0] // 2
    padded = np.pad(img, r, mode="symmetric")
    out = np.zeros_like(img)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = np.sum(padded[i:i + 2 * r + 1, j:j + 2 * r + 1] * kernel2d)
    return out


# -- I/O -----------------------------------------------------------------------

def test_load_8bit_extremes(tmp_path):
    for value, expected in ((255, 1.0), (0, 0.0)):
        p = tmp_path / f"v{value}.png"
        Image.fromarray(np.full((5, 7), value, np.uint8)).save(p)
        img = load_image(p)
        assert img.shape == (5, 7) and img.dtype == np.float64
        assert np.all(img == expected)


def test_color_file_rejected(tmp_path):
    p = tmp_path / "rgb.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(p)
    with pytest.raises(ImageFormatError, match="unsupported channel count"):
        load_image(p)


def test_16bit_png_and_pgm(tmp_path):
    raw = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    for ext in ("png", "pgm"):
        p = tmp_path / f"a.{ext}"
        Image.fromarray(raw).save(p)
        np.testing.assert_array_equal(load_image(p), raw / 65535.0)


def test_mask_round_trip_is_0_255(tmp_path):
    rng = np.random.default_rng(0)
    mask = (rng.random((9, 11)) > 0.5).astype(np.uint8)
    p = tmp_path / "m.png"
    save_image(mask, p)
    assert set(np.unique(np.asarray(Image.open(p)))) <= {0, 255}
    np.testing.assert_array_equal(load_mask(p), mask)


def test_vgm_is_lossless_outside_unit_range(tmp_path):
    p = tmp_path / "f.vgm"
    save_image(np.full((3, 2), 3.25), p)
    back = load_image(p)
    assert back.shape == (3, 2) and np.all(back == 3.25)
    blob = p.read_bytes()
    assert blob[:4] == b"VGM1"
    assert struct.unpack("<II", blob[4:12]) == (3, 2)
    assert len(blob) == 12 + 4 * 6


def test_out_of_range_needs_vgm(tmp_path):
    with pytest.raises(ValueError):
        save_image(np.full((2, 2), 3.25), tmp_path / "f.png")


def test_save_into_missing_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        save_image(np.zeros((2, 2)), tmp_path / "nope" / "x.png")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(0, 1)))
def test_8bit_round_trip_within_quantization(tmp_path_factory, img):
    p = tmp_path_factory.mktemp("q") / "a.png"
    save_image(img, p)
    assert np.max(np.abs(load_image(p) - img)) <= 0.5 / 255 + 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, (4, 3), elements=st.floats(-1e6, 1e6, width=32)))
def test_vgm_round_trip_exact(tmp_path_factory, field):
    p = tmp_path_factory.mktemp("v") / "a.vgm"
    save_image(field, p)
    np.testing.assert_array_equal(load_image(p), field.astype(np.float64))


# -- Gaussian derivatives --------------------------------------------------------

def test_constant_image_has_zero_hessian():
    for sigma in (1, 2.5, 4):
        for d in gaussian_second_derivatives(np.full((20, 24), 0.7), sigma):
            assert np.max(np.abs(d)) < 1e-6


@pytest.mark.parametrize("sigma", [1.0, 2.0])
def test_quadratic_ramp_matches_dense_oracle(sigma):
    K = 1600.0
    h = w = 44
    x = np.arange(w, dtype=np.float64)
    img = np.tile(x ** 2 / K, (h, 1))
    ixx, ixy, iyy = gaussian_second_derivatives(img, sigma)
    # wide support so truncation of the sampled closed form is negligible
    g, d2 = analytic_kernels(sigma, extent=8)
    oracle_xx = dense_filter(img, np.outer(g, d2)) * sigma ** 2
    r = math.ceil(8 * sigma)
    inner = (slice(r, h - r), slice(r, w - r))
    expected = sigma ** 2 * 2 / K
    # sampling the closed form at sigma=1 costs about 1e-4 relative
    np.testing.assert_allclose(oracle_xx[inner], expected, rtol=1e-3)
    np.testing.assert_allclose(ixx[inner], oracle_xx[inner], rtol=1e-3)
    # the moment-corrected kernel differentiates quadratics exactly
    np.testing.assert_allclose(ixx[inner], expected, rtol=1e-9)
    assert np.max(np.abs(ixy[inner])) < 1e-9
    assert np.max(np.abs(iyy[inner])) < 1e-9


def test_bright_dot_has_negative_curvature():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    ixx, _, iyy = gaussian_second_derivatives(img, 1.0)
    g, d2 = analytic_kernels(1.0)
    oracle = dense_filter(img, np.outer(g, d2))
    assert oracle[7, 7] < 0 and ixx[7, 7] < 0 and iyy[7, 7] < 0
    assert ixx[7, 7] == pytest.approx(oracle[7, 7], rel=0.05)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0.1, 0.9), st.floats(1.0, 3.0))
def test_derivatives_are_linear(seed, a, sigma):
    rng = np.random.default_rng(seed)
    i1, i2 = rng.random((2, 16, 18))
    b = 1 - a
    combined = gaussian_second_derivatives(a * i1 + b * i2, sigma)
    d1 = gaussian_second_derivatives(i1, sigma)
    d2 = gaussian_second_derivatives(i2, sigma)
    for c, x, y in zip(combined, d1, d2):
        np.testing.assert_allclose(c, a * x + b * y, atol=1e-5)


# -- percentile and patches ---------------------------------------------------

def test_percentile_nearest_rank():
    field = np.arange(1, 11, dtype=np.float64)
    assert percentile(field, 92) == 10
    # sort oracle: rank ceil(0.92 * 10) = 10 -> index 9
    assert percentile(field, 92) == np.sort(field)[math.ceil(0.92 * 10) - 1]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-1e3, 1e3)),
       st.floats(0, 100), st.floats(0, 100))
def test_percentile_bounds_and_monotone(field, a1, a2):
    assert percentile(field, 0) == field.min()
    assert percentile(field, 100) == field.max()
    lo, hi = sorted((a1, a2))
    assert percentile(field, lo) <= percentile(field, hi)
    assert percentile(field, lo) in field


def test_partition_counts_and_errors():
    assert partition(np.zeros((224, 224)), 16).shape == (196, 16, 16)
    r = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(partition(r, 4)[0], r)
    with pytest.raises(ValueError, match="does not divide"):
        partition(np.zeros((6, 4)), 4)


def test_partition_is_row_major():
    r = np.arange(64).reshape(8, 8)
    patches = partition(r, 4)
    np.testing.assert_array_equal(patches[1], r[:4, 4:])
    np.testing.assert_array_equal(patches[2], r[4:, :4])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 1000))
def test_partition_reassemble_identity(rows, cols, p, seed):
    r = np.random.default_rng(seed).random((rows * p, cols * p))
    np.testing.assert_array_equal(reassemble(partition(r, p), rows, cols), r)
