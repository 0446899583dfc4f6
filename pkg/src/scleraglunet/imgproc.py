"""Deterministic image ingestion, QC, normalization, CLAHE, multi-scale
Frangi vesselness, and binary vessel-mask extraction.

All images are immutable value objects backed by numpy arrays; every
operation is pure, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .errors import InvalidParam, IoFailure, MalformedImage

SPECULAR_LEVEL = 250.0 / 255.0


@dataclass(frozen=True)
class RasterImage:
    """8-bit image, data shaped (height, width, channels)."""

    width: int
    height: int
    channels: int
    data: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise InvalidParam(f"channels must be 1 or 3, got {self.channels}")
        if self.width < 1 or self.height < 1:
            raise InvalidParam("image dimensions must be >= 1")
        if self.data.shape != (self.height, self.width, self.channels):
            raise InvalidParam("data shape does not match declared dimensions")
        if self.data.dtype != np.uint8:
            raise InvalidParam("data must be uint8")


@dataclass(frozen=True)
class GrayImage:
    """Real-valued image with samples in [0, 1], data shaped (height, width)."""

    width: int
    height: int
    data: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        if self.data.shape != (self.height, self.width):
            raise InvalidParam("data shape does not match declared dimensions")
        if not np.all(np.isfinite(self.data)):
            raise InvalidParam("samples must be finite")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise InvalidParam("samples must lie in [0, 1]")


def gray_from_array(arr: np.ndarray, degenerate: bool = False) -> GrayImage:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return GrayImage(width=arr.shape[1], height=arr.shape[0], data=arr,
                     degenerate=degenerate)


@dataclass(frozen=True)
class VesselnessMap:
    width: int
    height: int
    data: np.ndarray
    scales_used: tuple

    def __post_init__(self):
        if self.data.shape != (self.height, self.width):
            raise InvalidParam("data shape does not match declared dimensions")
        scales = list(self.scales_used)
        if not scales or any(s <= 0 for s in scales):
            raise InvalidParam("scales must be non-empty and positive")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise InvalidParam("scales must be strictly increasing")


@dataclass(frozen=True)
class BinaryMask:
    width: int
    height: int
    bits: np.ndarray
    threshold: float = 0.0
    degenerate: bool = False


@dataclass(frozen=True)
class QcThresholds:
    blur_min: float = 1e-4
    specular_max: float = 0.05
    mean_low: float = 0.15
    mean_high: float = 0.9


@dataclass(frozen=True)
class QcReport:
    blur_score: float
    specular_fraction: float
    mean_intensity: float
    passed: bool


# ---------------------------------------------------------------------------
# Portable-anymap I/O (P5 grayscale / P6 RGB, maxval 255)
# ---------------------------------------------------------------------------

def _read_pnm_tokens(buf: bytes, count: int):
    """Read `count` whitespace-separated header tokens, skipping # comments.

    Returns (tokens, offset of first payload byte).
    """
    tokens = []
    i = 0
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i] != 0x0A:
                i += 1
            continue
        if i >= n:
            raise MalformedImage("truncated header")
        j = i
        while j < n and not buf[j:j + 1].isspace():
            j += 1
        tokens.append(buf[i:j])
        i = j
    if i >= n or not buf[i:i + 1].isspace():
        raise MalformedImage("missing whitespace after maxval")
    return tokens, i + 1


def load_image(path) -> RasterImage:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise MalformedImage("bad magic, expected P5 or P6")
    channels = 1 if buf[:2] == b"P5" else 3
    tokens, payload_at = _read_pnm_tokens(buf[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise MalformedImage("non-numeric header field") from exc
    if maxval != 255:
        raise MalformedImage(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise MalformedImage("non-positive dimensions")
    payload = buf[2 + payload_at:]
    need = width * height * channels
    if len(payload) < need:
        raise MalformedImage(f"truncated payload: {len(payload)} < {need}")
    data = np.frombuffer(payload[:need], dtype=np.uint8).reshape(height, width, channels)
    return RasterImage(width=width, height=height, channels=channels, data=data.copy())


def save_image(img: RasterImage, path) -> None:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(img.data.tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def raster_from_gray(img: GrayImage) -> RasterImage:
    """Quantize a [0,1] image to an 8-bit single-channel raster."""
    q = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    return RasterImage(width=img.width, height=img.height, channels=1,
                       data=q[:, :, None])


# ---------------------------------------------------------------------------
# Grayscale conversion and intensity normalization
# ---------------------------------------------------------------------------

_LUMA = np.array([0.299, 0.587, 0.114])


def to_gray(img: RasterImage) -> GrayImage:
    if img.channels == 3:
        vals = img.data.astype(np.float64) @ _LUMA
    else:
        vals = img.data[:, :, 0].astype(np.float64)
    return gray_from_array(np.clip(vals / 255.0, 0.0, 1.0))


def normalize_intensity(img: GrayImage, p_low: float = 1.0, p_high: float = 99.0) -> GrayImage:
    if not (0.0 <= p_low < p_high <= 100.0):
        raise InvalidParam("require 0 <= p_low < p_high <= 100")
    lo = float(np.percentile(img.data, p_low))
    hi = float(np.percentile(img.data, p_high))
    if hi == lo:
        return gray_from_array(np.full_like(img.data, 0.5), degenerate=True)
    out = np.clip((img.data - lo) / (hi - lo), 0.0, 1.0)
    return gray_from_array(out)


# ---------------------------------------------------------------------------
# CLAHE
# ---------------------------------------------------------------------------

def _tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry lookup table: clipped-histogram CDF of one tile."""
    bins = np.minimum((tile * 256.0).astype(np.int64), 255)
    hist = np.bincount(bins.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    cap = clip_limit * total / 256.0
    excess = np.maximum(hist - cap, 0.0).sum()
    hist = np.minimum(hist, cap) + excess / 256.0
    cdf = np.cumsum(hist) / total
    return cdf


def clahe(img: GrayImage, tiles_x: int = 8, tiles_y: int = 8,
          clip_limit: float = 4.0) -> GrayImage:
    if tiles_x < 1 or tiles_y < 1 or clip_limit <= 0:
        raise InvalidParam("tiles must be >= 1 and clip_limit > 0")
    h, w = img.height, img.width
    # tile boundaries (last tile absorbs the remainder)
    xs = np.linspace(0, w, tiles_x + 1).astype(np.int64)
    ys = np.linspace(0, h, tiles_y + 1).astype(np.int64)
    luts = np.empty((tiles_y, tiles_x, 256))
    centers_x = np.empty(tiles_x)
    centers_y = np.empty(tiles_y)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            tile = img.data[ys[ty]:ys[ty + 1], xs[tx]:xs[tx + 1]]
            luts[ty, tx] = _tile_mapping(tile, clip_limit)
            centers_x[tx] = (xs[tx] + xs[tx + 1] - 1) / 2.0
            centers_y[ty] = (ys[ty] + ys[ty + 1] - 1) / 2.0

    bins = np.minimum((img.data * 256.0).astype(np.int64), 255)
    # bilinear interpolation between the four nearest tile mappings,
    # clamped outside the tile-center grid
    px = np.clip(np.searchsorted(centers_x, np.arange(w), side="right") - 1, 0, tiles_x - 1)
    py = np.clip(np.searchsorted(centers_y, np.arange(h), side="right") - 1, 0, tiles_y - 1)
    px1 = np.minimum(px + 1, tiles_x - 1)
    py1 = np.minimum(py + 1, tiles_y - 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        fx = np.where(px1 > px,
                      (np.arange(w) - centers_x[px]) / (centers_x[px1] - centers_x[px]), 0.0)
        fy = np.where(py1 > py,
                      (np.arange(h) - centers_y[py]) / (centers_y[py1] - centers_y[py]), 0.0)
    fx = np.clip(fx, 0.0, 1.0)
    fy = np.clip(fy, 0.0, 1.0)

    out = np.empty((h, w))
    for ty in range(tiles_y):
        rows = np.nonzero(py == ty)[0]
        if rows.size == 0:
            continue
        ty1 = py1[rows[0]]
        wy = fy[rows][:, None]
        for tx in range(tiles_x):
            cols = np.nonzero(px == tx)[0]
            if cols.size == 0:
                continue
            tx1 = px1[cols[0]]
            wx = fx[cols][None, :]
            b = bins[np.ix_(rows, cols)]
            v00 = luts[ty, tx][b]
            v01 = luts[ty, tx1][b]
            v10 = luts[ty1, tx][b]
            v11 = luts[ty1, tx1][b]
            top = v00 * (1 - wx) + v01 * wx
            bot = v10 * (1 - wx) + v11 * wx
            out[np.ix_(rows, cols)] = top * (1 - wy) + bot * wy
    return gray_from_array(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Multi-scale Frangi vesselness
# ---------------------------------------------------------------------------

def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with edge-clamp boundary handling."""
    k = gaussian_kernel_1d(sigma)
    out = correlate1d(arr, k, axis=0, mode="nearest")
    return correlate1d(out, k, axis=1, mode="nearest")


def _shift(arr: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shifted view with clamped (replicated) borders."""
    h, w = arr.shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return arr[np.ix_(ys, xs)]


def hessian_at_scale(arr: np.ndarray, sigma: float):
    """Scale-normalized Hessian: Gaussian smoothing then central second
    differences with clamped borders."""
    g = gaussian_smooth(arr, sigma)
    s2 = sigma * sigma
    hxx = s2 * (_shift(g, 0, 1) - 2.0 * g + _shift(g, 0, -1))
    hyy = s2 * (_shift(g, 1, 0) - 2.0 * g + _shift(g, -1, 0))
    hxy = s2 * (_shift(g, 1, 1) - _shift(g, 1, -1)
                - _shift(g, -1, 1) + _shift(g, -1, -1)) / 4.0
    return hxx, hxy, hyy


def vesselness_at_scale(arr: np.ndarray, sigma: float, beta: float,
                        c: float | None) -> np.ndarray:
    """Single-scale Frangi response for bright ridges in `arr`."""
    hxx, hxy, hyy = hessian_at_scale(arr, sigma)
    half_trace = (hxx + hyy) / 2.0
    root = np.sqrt(((hxx - hyy) / 2.0) ** 2 + hxy ** 2)
    mu1 = half_trace + root
    mu2 = half_trace - root
    # order by absolute value: |lam1| <= |lam2|
    swap = np.abs(mu1) > np.abs(mu2)
    lam1 = np.where(swap, mu2, mu1)
    lam2 = np.where(swap, mu1, mu2)
    s = np.sqrt(lam1 ** 2 + lam2 ** 2)
    if c is None:
        c = s.max() / 2.0
    if c <= 0.0:
        return np.zeros_like(arr)
    with np.errstate(invalid="ignore", divide="ignore"):
        rb = np.where(lam2 != 0.0, np.abs(lam1) / np.abs(lam2), 0.0)
    v = np.exp(-rb ** 2 / (2.0 * beta ** 2)) * (1.0 - np.exp(-s ** 2 / (2.0 * c ** 2)))
    return np.where(lam2 > 0.0, 0.0, v)


def frangi(img: GrayImage, scales=(1.0, 2.0, 4.0), beta: float = 0.5,
           c: float | None = None) -> VesselnessMap:
    scales = tuple(float(s) for s in scales)
    if not scales or any(s <= 0 for s in scales):
        raise InvalidParam("scales must be non-empty and positive")
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise InvalidParam("scales must be strictly increasing")
    if beta <= 0 or (c is not None and c <= 0):
        raise InvalidParam("beta and c must be positive")
    inverted = 1.0 - img.data  # dark vessels become bright ridges
    best = np.zeros_like(inverted)
    for sigma in scales:
        best = np.maximum(best, vesselness_at_scale(inverted, sigma, beta, c))
    peak = best.max()
    if peak > 0.0:
        best = best / peak
    return VesselnessMap(width=img.width, height=img.height,
                         data=best, scales_used=scales)


# ---------------------------------------------------------------------------
# Otsu binarization
# ---------------------------------------------------------------------------

def otsu_bin(data: np.ndarray) -> int | None:
    """Index k of the best split {bins <= k} vs {bins > k}; None if degenerate."""
    bins = np.minimum((data * 256.0).astype(np.int64), 255)
    hist = np.bincount(bins.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    w0 = np.cumsum(hist)
    sum0 = np.cumsum(hist * np.arange(256))
    mean_all = sum0[-1] / total
    best_k = None
    best_var = 0.0
    for k in range(255):
        n0 = w0[k]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        m0 = sum0[k] / n0
        m1 = (sum0[-1] - sum0[k]) / n1
        var = n0 * n1 * (m0 - m1) ** 2
        if var > best_var:
            best_var = var
            best_k = k
    return best_k


def binarize(vmap: VesselnessMap) -> BinaryMask:
    k = otsu_bin(vmap.data)
    if k is None:
        return BinaryMask(width=vmap.width, height=vmap.height,
                          bits=np.zeros_like(vmap.data, dtype=bool),
                          threshold=0.0, degenerate=True)
    threshold = (k + 1) / 256.0
    return BinaryMask(width=vmap.width, height=vmap.height,
                      bits=vmap.data > threshold, threshold=threshold)


# ---------------------------------------------------------------------------
# Quality control
# ---------------------------------------------------------------------------

def laplacian_response(data: np.ndarray) -> np.ndarray:
    return (_shift(data, 0, 1) + _shift(data, 0, -1)
            + _shift(data, 1, 0) + _shift(data, -1, 0) - 4.0 * data)


def quality_check(img: GrayImage, thresholds: QcThresholds = QcThresholds()) -> QcReport:
    if not thresholds.mean_low < thresholds.mean_high:
        raise InvalidParam("mean_low must be < mean_high")
    lap = laplacian_response(img.data)
    blur = float(lap.var())
    spec = float(np.mean(img.data >= SPECULAR_LEVEL))
    mean = float(img.data.mean())
    passed = (blur >= thresholds.blur_min
              and spec <= thresholds.specular_max
              and thresholds.mean_low <= mean <= thresholds.mean_high)
    return QcReport(blur_score=blur, specular_fraction=spec,
                    mean_intensity=mean, passed=passed)


# ---------------------------------------------------------------------------
# Resizing (working-resolution crop)
# ---------------------------------------------------------------------------

def resize_area(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Block-mean downsample when dimensions divide evenly, else bilinear."""
    if out_w < 1 or out_h < 1:
        raise InvalidParam("output dimensions must be >= 1")
    h, w = img.height, img.width
    if h % out_h == 0 and w % out_w == 0:
        fy, fx = h // out_h, w // out_w
        out = img.data.reshape(out_h, fy, out_w, fx).mean(axis=(1, 3))
        return gray_from_array(out)
    ys = (np.arange(out_h) + 0.5) * h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * w / out_w - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    d = img.data
    top = d[np.ix_(y0, x0)] * (1 - wx) + d[np.ix_(y0, x1)] * wx
    bot = d[np.ix_(y1, x0)] * (1 - wx) + d[np.ix_(y1, x1)] * wx
    return gray_from_array(np.clip(top * (1 - wy) + bot * wy, 0.0, 1.0))


def crop(img: GrayImage, x: int, y: int, w: int, h: int) -> GrayImage:
    if x < 0 or y < 0 or x + w > img.width or y + h > img.height or w < 1 or h < 1:
        raise InvalidParam("crop rectangle outside image bounds")
    return gray_from_array(img.data[y:y + h, x:x + w])
