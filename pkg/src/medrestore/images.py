"""Image buffers, PNG I/O, resampling for data preparation, and PSNR/SSIM.

Images live in [0, 1] as float32 RGB throughout; files are PNG only.
Metrics are computed on RGB directly (no luma conversion) in float64.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from .autodiff import bilinear_weight_matrix

PSNR_IDENTICAL = math.inf

RESIZE_METHODS = ("nearest", "bilinear", "bicubic", "area")


@dataclass
class ImageBuffer:
    """RGB image, float32 values in [0, 1], with optional file provenance."""

    data: np.ndarray
    path: str | None = field(default=None, compare=False)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"ImageBuffer expects (H, W, 3) data, got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image extents must be >= 1")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_chw(self) -> np.ndarray:
        """(1, 3, H, W) float32 view for the tensor side."""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1)[None])

    @classmethod
    def from_chw(cls, arr: np.ndarray, path: str | None = None) -> "ImageBuffer":
        if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 3:
            raise ValueError(f"expected (1, 3, H, W), got {arr.shape}")
        data = np.clip(arr[0].transpose(1, 2, 0), 0.0, 1.0)
        return cls(data, path=path)


def read_png(path) -> ImageBuffer:
    """Read an 8- or 16-bit RGB/RGBA/grayscale PNG, scaled to [0, 1].

    Alpha channels are dropped with a warning; grayscale is promoted to RGB
    by replication.
    """
    path = str(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            arr = np.asarray(im)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode PNG file {path!r}: {exc}") from exc

    if mode == "RGB":
        data = arr.astype(np.float32) / 255.0
    elif mode == "RGBA":
        warnings.warn(f"{path}: dropping alpha channel", stacklevel=2)
        data = arr[:, :, :3].astype(np.float32) / 255.0
    elif mode == "L":
        data = np.repeat(arr.astype(np.float32)[:, :, None] / 255.0, 3, axis=2)
    elif mode == "LA":
        warnings.warn(f"{path}: dropping alpha channel", stacklevel=2)
        data = np.repeat(arr[:, :, 0].astype(np.float32)[:, :, None] / 255.0, 3, axis=2)
    elif mode in ("I", "I;16"):
        data = np.repeat(arr.astype(np.float32)[:, :, None] / 65535.0, 3, axis=2)
    else:
        raise ValueError(f"unsupported PNG color type {mode!r} in {path!r}")
    return ImageBuffer(np.clip(data, 0.0, 1.0), path=path)


def write_png(img: ImageBuffer, path) -> None:
    """Write as 8-bit RGB, quantizing with round-half-up."""
    q = np.clip(np.floor(img.data * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(str(path), format="PNG")


def read_mask_png(path) -> np.ndarray:
    """Read a single-channel mask PNG: 0 = hole, 255 = keep; returns float32 {0,1} (H, W)."""
    path = str(path)
    with Image.open(path) as im:
        im.load()
        if im.mode not in ("L", "1"):
            im = im.convert("L")
        arr = np.asarray(im)
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1, 255)).all():
        raise ValueError(f"mask {path!r} is not binary (found values {uniq[:8]})")
    return (arr > 0).astype(np.float32)


def write_mask_png(mask: np.ndarray, path) -> None:
    m = np.asarray(mask)
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(str(path), format="PNG")


# ---------------------------------------------------------------------------
# Resampling (plain numpy, non-differentiable; used for data preparation)


def _cubic_kernel(t: np.ndarray) -> np.ndarray:
    # Keys cubic with a = -0.5 (the standard bicubic convolution kernel).
    a = -0.5
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    out[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    out[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return out


def _bicubic_matrix(n: int, factor: int) -> np.ndarray:
    m = np.zeros((factor * n, n))
    for o in range(factor * n):
        s = (o + 0.5) / factor - 0.5
        base = math.floor(s)
        taps = np.arange(base - 1, base + 3)
        w = _cubic_kernel(s - taps)
        w /= w.sum()
        np.add.at(m[o], np.clip(taps, 0, n - 1), w)
    return m


def _nearest_matrix(n: int, factor: int) -> np.ndarray:
    m = np.zeros((factor * n, n))
    for o in range(factor * n):
        m[o, min(int((o + 0.5) / factor), n - 1)] = 1.0
    return m


_UP_MATRIX = {"nearest": _nearest_matrix, "bilinear": bilinear_weight_matrix, "bicubic": _bicubic_matrix}


def _upscale(data: np.ndarray, factor: int, method: str) -> np.ndarray:
    if method not in _UP_MATRIX:
        raise ValueError(f"upscaling supports {sorted(_UP_MATRIX)}, not {method!r}")
    h, w = data.shape[:2]
    mh = _UP_MATRIX[method](h, factor)
    mw = _UP_MATRIX[method](w, factor)
    return np.einsum("ij,jkc,lk->ilc", mh, data.astype(np.float64), mw)


def _downscale(data: np.ndarray, factor: int, method: str) -> np.ndarray:
    h, w = data.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by downscale factor {factor}")
    if method == "area":
        return data.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))
    if method == "nearest":
        return data[::factor, ::factor]
    raise ValueError(f"downscaling supports ['area', 'nearest'], not {method!r}")


def resize(img: ImageBuffer, factor: float, method: str = "bilinear") -> ImageBuffer:
    """Resize by a power-of-two-friendly factor.

    factor > 1 upscales by int(factor); factor < 1 downscales by
    int(1/factor) (extents must divide); factor == 1 is the identity.
    """
    if method not in RESIZE_METHODS:
        raise ValueError(f"unknown resize method {method!r}")
    if factor == 1:
        return ImageBuffer(img.data.copy())
    if factor > 1:
        f = int(factor)
        if f != factor:
            raise ValueError(f"upscale factor must be an integer, got {factor}")
        out = _upscale(img.data, f, method)
    else:
        inv = 1.0 / factor
        f = int(round(inv))
        if abs(inv - f) > 1e-9:
            raise ValueError(f"downscale factor must be 1/int, got {factor}")
        out = _downscale(img.data, f, method)
    return ImageBuffer(np.clip(out, 0.0, 1.0).astype(np.float32))


def area_down_array(arr: np.ndarray, factor: int) -> np.ndarray:
    """Block-average a (H, W, C) or (H, W) array by an integer factor."""
    if factor == 1:
        return arr.copy()
    if arr.ndim == 2:
        return _downscale(arr[:, :, None], factor, "area")[:, :, 0].astype(arr.dtype)
    return _downscale(arr, factor, "area").astype(arr.dtype)


def nearest_down_array(arr: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return arr.copy()
    return arr[::factor, ::factor].copy()


# ---------------------------------------------------------------------------
# Quality metrics


def psnr(a: ImageBuffer, b: ImageBuffer, where: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB with MAX = 1.

    Identical inputs return math.inf as the distinguished value.  ``where``
    optionally restricts the computation to a boolean (H, W) pixel subset.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"psnr shape mismatch: {a.data.shape} vs {b.data.shape}")
    diff = (a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2
    if where is not None:
        if where.shape != a.data.shape[:2]:
            raise ValueError(f"psnr selector shape {where.shape} does not match image {a.data.shape[:2]}")
        if not where.any():
            raise ValueError("psnr selector excludes every pixel")
        diff = diff[where.astype(bool)]
    m = float(diff.mean())
    if m == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / m)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _gaussian_taps(n: int, sigma: float) -> np.ndarray:
    x = np.arange(n) - (n - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable 'valid' filtering of a 2-D array."""
    n = taps.size
    x = sliding_window_view(x, n, axis=0) @ taps
    x = sliding_window_view(x, n, axis=1) @ taps
    return x


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5).

    Standard constants K1=0.01, K2=0.03 with dynamic range L=1; computed per
    channel on RGB and averaged.
    """
    if a.data.shape != b.data.shape:
        raise ValueError(f"ssim shape mismatch: {a.data.shape} vs {b.data.shape}")
    h, w = a.data.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"ssim needs extents >= {SSIM_WINDOW}, got {h}x{w}")
    taps = _gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    vals = []
    for ch in range(3):
        x = a.data[:, :, ch].astype(np.float64)
        y = b.data[:, :, ch].astype(np.float64)
        mx = _filter_valid(x, taps)
        my = _filter_valid(y, taps)
        sxx = _filter_valid(x * x, taps) - mx * mx
        syy = _filter_valid(y * y, taps) - my * my
        sxy = _filter_valid(x * y, taps) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))
