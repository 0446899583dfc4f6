"""Image ingestion, enhancement, and vesselness tests.

The Frangi checks compare the production implementation (separable Gaussian
smoothing plus central second differences) against a deliberately slow oracle
built from explicit 2-D clamped convolution and nested-loop stencils.
"""

import numpy as np
import pytest

from scleraglunet import imgproc
from scleraglunet.errors import InvalidParam, MalformedImage
from scleraglunet.imgproc import (
    BinaryMask,
    GrayImage,
    QcThresholds,
    RasterImage,
    binarize,
    clahe,
    crop,
    frangi,
    gray_from_array,
    load_image,
    normalize_intensity,
    quality_check,
    raster_from_gray,
    resize_area,
    save_image,
    to_gray,
)


# ---------------------------------------------------------------------------
# PNM I/O
# ---------------------------------------------------------------------------

def test_load_p5(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5 2 2 255 " + bytes([0, 64, 128, 255]))
    img = load_image(path)
    assert (img.width, img.height, img.channels) == (2, 2, 1)
    assert img.data[1, 1, 0] == 255


def test_load_p6(tmp_path):
    path = tmp_path / "a.ppm"
    payload = bytes([255, 0, 0, 0, 255, 0, 0, 0, 255])
    path.write_bytes(b"P6 3 1 255 " + payload)
    img = load_image(path)
    assert (img.width, img.height, img.channels) == (3, 1, 3)
    assert tuple(img.data[0, 0]) == (255, 0, 0)
    assert tuple(img.data[0, 2]) == (0, 0, 255)


def test_load_truncated_payload(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5 2 2 255 " + bytes([0, 1, 2]))
    with pytest.raises(MalformedImage):
        load_image(path)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P4 2 2 255 " + bytes(4))
    with pytest.raises(MalformedImage):
        load_image(path)


def test_load_wrong_maxval(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5 1 1 65535 " + bytes(2))
    with pytest.raises(MalformedImage):
        load_image(path)


def test_load_comment_header(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n# comment line\n2 1 255\n" + bytes([7, 9]))
    img = load_image(path)
    assert img.data[0, 1, 0] == 9


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    img = RasterImage(width=7, height=5, channels=3, data=data)
    path = tmp_path / "rt.ppm"
    save_image(img, path)
    back = load_image(path)
    assert np.array_equal(back.data, data)
    # saving the reloaded image reproduces the file byte for byte
    save_image(back, tmp_path / "rt2.ppm")
    assert path.read_bytes() == (tmp_path / "rt2.ppm").read_bytes()


# ---------------------------------------------------------------------------
# Grayscale conversion
# ---------------------------------------------------------------------------

def test_to_gray_white():
    img = RasterImage(width=1, height=1, channels=3,
                      data=np.full((1, 1, 3), 255, dtype=np.uint8))
    assert to_gray(img).data[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_to_gray_red_luma():
    data = np.zeros((1, 1, 3), dtype=np.uint8)
    data[0, 0, 0] = 255
    img = RasterImage(width=1, height=1, channels=3, data=data)
    assert to_gray(img).data[0, 0] == pytest.approx(0.299, abs=1e-12)


def test_to_gray_single_channel_scale():
    data = np.arange(4, dtype=np.uint8).reshape(2, 2, 1)
    img = RasterImage(width=2, height=2, channels=1, data=data)
    assert np.allclose(to_gray(img).data, data[:, :, 0] / 255.0)


# ---------------------------------------------------------------------------
# Intensity normalization
# ---------------------------------------------------------------------------

def test_normalize_identity_stretch():
    rng = np.random.default_rng(0)
    data = rng.random((8, 8))
    data[0, 0], data[-1, -1] = 0.0, 1.0
    out = normalize_intensity(gray_from_array(data), 0.0, 100.0)
    assert np.allclose(out.data, data, atol=1e-12)


def test_normalize_constant_degenerate():
    out = normalize_intensity(gray_from_array(np.full((4, 4), 0.3)), 1.0, 99.0)
    assert out.degenerate
    assert np.all(out.data == 0.5)


def test_normalize_two_level():
    data = np.array([[0.2, 0.6], [0.6, 0.2]])
    out = normalize_intensity(gray_from_array(data), 0.0, 100.0)
    assert set(np.unique(out.data)) == {0.0, 1.0}


def test_normalize_bad_percentiles():
    img = gray_from_array(np.zeros((2, 2)))
    with pytest.raises(InvalidParam):
        normalize_intensity(img, 50.0, 50.0)


def test_normalize_preserves_order():
    rng = np.random.default_rng(5)
    data = rng.random((16, 16))
    out = normalize_intensity(gray_from_array(data), 5.0, 95.0)
    a, b = data.ravel(), out.data.ravel()
    order = np.argsort(a)
    assert np.all(np.diff(b[order]) >= -1e-12)


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

def test_clahe_constant_image_saturates():
    img = gray_from_array(np.full((16, 16), 0.4))
    out = clahe(img, 1, 1, clip_limit=1e9)
    # delta histogram: the cdf reaches 1 at the occupied bin
    assert np.allclose(out.data, 1.0)


def test_clahe_uniform_histogram_near_identity():
    # one pixel in every intensity bin: the clipped cdf is the identity map
    vals = (np.arange(256) + 0.5) / 256.0
    data = vals.reshape(16, 16)
    out = clahe(gray_from_array(data), 1, 1, clip_limit=256.0)
    assert np.max(np.abs(out.data - data)) <= 1.0 / 256.0 + 1e-9


def test_clahe_zero_clip_rejected():
    img = gray_from_array(np.zeros((4, 4)))
    with pytest.raises(InvalidParam):
        clahe(img, 2, 2, clip_limit=0.0)


def test_clahe_single_tile_monotone():
    rng = np.random.default_rng(11)
    data = rng.random((32, 32))
    out = clahe(gray_from_array(data), 1, 1, clip_limit=4.0)
    order = np.argsort(data.ravel())
    assert np.all(np.diff(out.data.ravel()[order]) >= -1e-12)


def test_clahe_range_and_determinism():
    rng = np.random.default_rng(12)
    data = rng.random((40, 40))
    img = gray_from_array(data)
    a = clahe(img, 4, 4, clip_limit=3.0)
    b = clahe(img, 4, 4, clip_limit=3.0)
    assert np.array_equal(a.data, b.data)
    assert a.data.min() >= 0.0 and a.data.max() <= 1.0


# ---------------------------------------------------------------------------
# Frangi vesselness
# ---------------------------------------------------------------------------

def _clamped_conv2d(arr, kernel):
    """Nested-loop 2-D correlation with replicated borders (oracle)."""
    h, w = arr.shape
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    out = np.zeros_like(arr)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-ry, ry + 1):
                for dx in range(-rx, rx + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += arr[yy, xx] * kernel[dy + ry, dx + rx]
            out[y, x] = acc
    return out


def _oracle_hessian(arr, sigma):
    k1 = imgproc.gaussian_kernel_1d(sigma)
    g = _clamped_conv2d(arr, np.outer(k1, k1))
    h, w = arr.shape
    s2 = sigma * sigma

    def at(y, x):
        return g[min(max(y, 0), h - 1), min(max(x, 0), w - 1)]

    hxx = np.zeros_like(arr)
    hyy = np.zeros_like(arr)
    hxy = np.zeros_like(arr)
    for y in range(h):
        for x in range(w):
            hxx[y, x] = s2 * (at(y, x + 1) - 2 * at(y, x) + at(y, x - 1))
            hyy[y, x] = s2 * (at(y + 1, x) - 2 * at(y, x) + at(y - 1, x))
            hxy[y, x] = s2 * (at(y + 1, x + 1) - at(y + 1, x - 1)
                              - at(y - 1, x + 1) + at(y - 1, x - 1)) / 4.0
    return hxx, hxy, hyy


def _oracle_frangi(data, scales, beta):
    inv = 1.0 - data
    best = np.zeros_like(data)
    for sigma in scales:
        hxx, hxy, hyy = _oracle_hessian(inv, sigma)
        v = np.zeros_like(data)
        smax = 0.0
        svals = np.zeros_like(data)
        for y in range(data.shape[0]):
            for x in range(data.shape[1]):
                a, b, d = hxx[y, x], hxy[y, x], hyy[y, x]
                half = (a + d) / 2.0
                root = np.sqrt(((a - d) / 2.0) ** 2 + b * b)
                mu1, mu2 = half + root, half - root
                if abs(mu1) > abs(mu2):
                    mu1, mu2 = mu2, mu1
                svals[y, x] = np.sqrt(mu1 * mu1 + mu2 * mu2)
                smax = max(smax, svals[y, x])
        c = smax / 2.0
        if c <= 0.0:
            continue
        for y in range(data.shape[0]):
            for x in range(data.shape[1]):
                a, b, d = hxx[y, x], hxy[y, x], hyy[y, x]
                half = (a + d) / 2.0
                root = np.sqrt(((a - d) / 2.0) ** 2 + b * b)
                mu1, mu2 = half + root, half - root
                if abs(mu1) > abs(mu2):
                    mu1, mu2 = mu2, mu1
                if mu2 > 0.0:
                    continue
                rb = abs(mu1) / abs(mu2) if mu2 != 0.0 else 0.0
                s = svals[y, x]
                v[y, x] = (np.exp(-rb * rb / (2 * beta * beta))
                           * (1.0 - np.exp(-s * s / (2 * c * c))))
        best = np.maximum(best, v)
    peak = best.max()
    return best / peak if peak > 0 else best


def _ridge_image(size, half_width, depth=0.5):
    """Dark horizontal Gaussian ridge through the middle of a bright field."""
    y = np.arange(size)[:, None] - (size - 1) / 2.0
    return np.clip(0.9 - depth * np.exp(-0.5 * (y / half_width) ** 2)
                   * np.ones((1, size)), 0.0, 1.0)


def test_frangi_constant_zero():
    out = frangi(gray_from_array(np.full((16, 16), 0.6)))
    assert np.all(out.data == 0.0)


def test_frangi_matches_loop_oracle():
    rng = np.random.default_rng(21)
    data = np.clip(_ridge_image(32, 2.0) + rng.normal(0, 0.02, (32, 32)), 0, 1)
    got = frangi(gray_from_array(data), scales=(1.0, 2.0, 4.0), beta=0.5)
    want = _oracle_frangi(data, (1.0, 2.0, 4.0), 0.5)
    assert np.max(np.abs(got.data - want)) < 1e-6


def test_frangi_ridge_scale_selectivity():
    sigma_r = 2.0
    data = _ridge_image(48, sigma_r)
    center = 48 // 2

    def centerline(sigma):
        v = imgproc.vesselness_at_scale(1.0 - data, sigma, 0.5, None)
        return v[center, 24]

    matched = centerline(sigma_r)
    assert matched >= centerline(sigma_r / 2.0)
    assert matched >= centerline(2.0 * sigma_r)


def test_frangi_blob_below_ridge():
    size = 48
    y = np.arange(size)[:, None] - (size - 1) / 2.0
    x = np.arange(size)[None, :] - (size - 1) / 2.0
    ridge = np.clip(0.9 - 0.5 * np.exp(-0.5 * (y / 2.0) ** 2)
                    * np.ones((1, size)), 0, 1)
    blob = np.clip(0.9 - 0.5 * np.exp(-0.5 * ((y / 2.0) ** 2 + (x / 2.0) ** 2)), 0, 1)
    c = size // 2
    v_ridge = frangi(gray_from_array(ridge), scales=(2.0,)).data[c, c]
    v_blob = frangi(gray_from_array(blob), scales=(2.0,)).data[c, c]
    # normalization is per image, so compare the un-normalized responses
    vr = imgproc.vesselness_at_scale(1.0 - ridge, 2.0, 0.5, None)[c, c]
    vb = imgproc.vesselness_at_scale(1.0 - blob, 2.0, 0.5, None)[c, c]
    assert vb < vr
    assert v_blob <= v_ridge + 1e-12


def test_frangi_shift_invariance():
    rng = np.random.default_rng(8)
    data = np.clip(0.3 + 0.3 * rng.random((20, 20)), 0, 1)
    a = frangi(gray_from_array(data), scales=(1.0, 2.0))
    b = frangi(gray_from_array(np.clip(data + 0.1, 0, 1)), scales=(1.0, 2.0))
    assert np.allclose(a.data, b.data, atol=1e-9)


def test_frangi_rotation_equivariance():
    data = _ridge_image(32, 2.0)
    a = frangi(gray_from_array(data), scales=(2.0,)).data
    b = frangi(gray_from_array(np.ascontiguousarray(np.rot90(data))),
               scales=(2.0,)).data
    inner = (slice(4, -4), slice(4, -4))
    assert np.allclose(np.rot90(a)[inner], b[inner], atol=1e-9)


def test_frangi_bad_params():
    img = gray_from_array(np.zeros((8, 8)))
    with pytest.raises(InvalidParam):
        frangi(img, scales=())
    with pytest.raises(InvalidParam):
        frangi(img, scales=(2.0, 1.0))
    with pytest.raises(InvalidParam):
        frangi(img, scales=(1.0,), beta=0.0)


# ---------------------------------------------------------------------------
# Otsu binarization
# ---------------------------------------------------------------------------

def _oracle_otsu(data):
    """Exhaustive between-class variance search over all 256 candidate bins."""
    bins = np.minimum((data * 256.0).astype(np.int64), 255).ravel()
    hist = np.bincount(bins, minlength=256).astype(float)
    best_k, best_var = None, 0.0
    for k in range(255):
        w0 = hist[:k + 1].sum()
        w1 = hist[k + 1:].sum()
        if w0 == 0 or w1 == 0:
            continue
        m0 = (hist[:k + 1] * np.arange(k + 1)).sum() / w0
        m1 = (hist[k + 1:] * np.arange(k + 1, 256)).sum() / w1
        var = w0 * w1 * (m0 - m1) ** 2
        if var > best_var:
            best_var, best_k = var, k
    return best_k


def test_binarize_bimodal():
    data = np.where(np.arange(100) < 60, 0.04, 0.78).reshape(10, 10)
    vmap = imgproc.VesselnessMap(width=10, height=10, data=data,
                                 scales_used=(1.0,))
    mask = binarize(vmap)
    assert 0.04 < mask.threshold < 0.78
    assert mask.bits.sum() == 40


def test_binarize_matches_exhaustive_oracle():
    rng = np.random.default_rng(4)
    for _ in range(5):
        data = rng.random((12, 12))
        vmap = imgproc.VesselnessMap(width=12, height=12, data=data,
                                     scales_used=(1.0,))
        mask = binarize(vmap)
        k = _oracle_otsu(data)
        assert mask.threshold == pytest.approx((k + 1) / 256.0)
        assert mask.bits.sum() == np.sum(data > mask.threshold)


def test_binarize_constant_degenerate():
    vmap = imgproc.VesselnessMap(width=4, height=4, data=np.full((4, 4), 0.2),
                                 scales_used=(1.0,))
    mask = binarize(vmap)
    assert mask.degenerate
    assert not mask.bits.any()


# ---------------------------------------------------------------------------
# Quality control
# ---------------------------------------------------------------------------

def test_qc_constant_fails_blur():
    report = quality_check(gray_from_array(np.full((8, 8), 0.5)))
    assert report.blur_score == 0.0
    assert not report.passed


def test_qc_checkerboard_blur_maximal():
    yy, xx = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    checker = ((yy + xx) % 2).astype(float)
    blur_checker = quality_check(gray_from_array(checker)).blur_score
    rng = np.random.default_rng(9)
    others = [rng.random((16, 16)), np.tile([0.0, 0.0, 1.0, 1.0], (16, 4)),
              np.linspace(0, 1, 256).reshape(16, 16)]
    for other in others:
        assert blur_checker > quality_check(gray_from_array(other)).blur_score


def test_qc_specular_fraction_counting():
    data = np.full((10, 10), 0.5)
    data.ravel()[:10] = 1.0
    report = quality_check(gray_from_array(data))
    assert report.specular_fraction == pytest.approx(0.10)


def test_qc_pass_band():
    rng = np.random.default_rng(2)
    data = np.clip(0.5 + 0.1 * rng.standard_normal((32, 32)), 0, 0.9)
    report = quality_check(gray_from_array(data), QcThresholds())
    assert report.passed


# ---------------------------------------------------------------------------
# Crop / resize plumbing
# ---------------------------------------------------------------------------

def test_crop_bounds():
    img = gray_from_array(np.arange(16.0).reshape(4, 4) / 16.0)
    sub = crop(img, 1, 2, 2, 2)
    assert sub.data.shape == (2, 2)
    assert sub.data[0, 0] == img.data[2, 1]
    with pytest.raises(InvalidParam):
        crop(img, 3, 3, 4, 4)


def test_resize_block_mean():
    data = np.array([[1.0, 2.0], [3.0, 4.0]]) / 4.0
    out = resize_area(gray_from_array(data), 1, 1)
    assert out.data[0, 0] == pytest.approx(2.5 / 4.0)


def test_resize_preserves_constant():
    img = gray_from_array(np.full((192, 192), 0.37))
    out = resize_area(img, 64, 64)
    assert np.allclose(out.data, 0.37)


def test_raster_round_trip_quantized():
    rng = np.random.default_rng(6)
    data = np.round(rng.random((6, 6)) * 255) / 255.0
    img = gray_from_array(data)
    back = to_gray(raster_from_gray(img))
    assert np.allclose(back.data, data, atol=1e-12)
