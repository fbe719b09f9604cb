"""Raster primitives: Gaussian kernels, plain and distance-decayed blurs,
exact Euclidean distance transforms, SSIM, and PNG I/O.

Conventions used throughout:

* images are float32 samples in [0, 1], row-major, shape (h, w) treated as
  one channel or (h, w, 3);
* convolution arithmetic runs in float64 with edge-clamp padding and a
  fixed summation order, so results are bit-identical across runs;
* masks binarize as ``data >= threshold`` and the subject region is the
  *set* side of the mask: distances are zero inside the subject and grow
  into the background, which is where the decay weight falls off.
"""

from __future__ import annotations

import io
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import correlate, correlate1d

__all__ = [
    "EmptyMaskError",
    "ImageBuffer",
    "Kernel",
    "Mask",
    "decay_blur",
    "decode_png",
    "distance_transform",
    "encode_png",
    "gaussian_blur",
    "gaussian_kernel",
    "read_png",
    "ssim",
    "to_luma",
    "write_png",
]


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one set mask pixel."""


@dataclass(frozen=True)
class ImageBuffer:
    """Dense raster: float32 samples in [0, 1], 1 or 3 channels."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w) or (h, w, 1|3), got {np.shape(self.data)}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image samples must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Mask:
    """Single-channel float mask in [0, 1] with binarization semantics."""

    data: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if arr.ndim != 2:
            raise ValueError(f"mask must be single-channel, got shape {np.shape(self.data)}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("mask samples must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def binary(self) -> np.ndarray:
        return self.data >= self.threshold


@dataclass(frozen=True)
class Kernel:
    """Odd-sized square convolution kernel normalized to unit sum.

    separable_1d, when present, holds the normalized 1D factor g such that
    weights == outer(g, g); gaussian_kernel always provides it.
    """

    size: int
    sigma: float
    weights: np.ndarray
    separable_1d: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float32)
        if self.size % 2 != 1 or self.size < 1:
            raise ValueError(f"kernel size must be odd and >= 1, got {self.size}")
        if w.shape != (self.size, self.size):
            raise ValueError(f"weights shape {w.shape} != ({self.size}, {self.size})")
        if abs(float(w.sum(dtype=np.float64)) - 1.0) > 1e-6:
            raise ValueError("kernel weights must sum to 1")
        object.__setattr__(self, "weights", w)


def gaussian_kernel(size: int, sigma: float) -> Kernel:
    """Sample G(x, y) = exp(-(x^2+y^2)/(2 sigma^2)) / (2 pi sigma^2) on the
    integer grid centered at 0 and normalize to unit sum."""
    if size % 2 != 1 or size < 1:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma)) / (2.0 * math.pi * sigma * sigma)
    grid = np.outer(g, g)
    grid /= grid.sum()
    g1d = g / g.sum()
    return Kernel(size=size, sigma=float(sigma),
                  weights=grid.astype(np.float32),
                  separable_1d=g1d)


def _clamp_correlate(plane: np.ndarray, kernel: Kernel) -> np.ndarray:
    """Edge-clamped 2D correlation of one float64 plane."""
    if kernel.separable_1d is not None:
        g = np.asarray(kernel.separable_1d, dtype=np.float64)
        out = correlate1d(plane, g, axis=0, mode="nearest")
        out = correlate1d(out, g, axis=1, mode="nearest")
        return out
    return correlate(plane, np.asarray(kernel.weights, dtype=np.float64), mode="nearest")


def gaussian_blur(img: ImageBuffer, kernel: Kernel) -> ImageBuffer:
    """2D convolution with edge-clamp padding; shape-preserving.

    Gaussian kernels run as two separable 1D passes; arbitrary unit-sum
    kernels fall back to the direct 2D path.
    """
    src = img.data.astype(np.float64)
    out = np.empty_like(src)
    for c in range(img.channels):
        out[:, :, c] = _clamp_correlate(src[:, :, c], kernel)
    return ImageBuffer(out.astype(np.float32))


def _edt_1d_squared(f: list[float], n: int) -> list[float]:
    """Lower envelope of parabolas (Felzenszwalb-Huttenlocher 1D pass)."""
    INF = math.inf
    d = [0.0] * n
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    v[0] = 0
    z[0] = -INF
    z[1] = INF
    for q in range(1, n):
        if f[q] == INF:
            continue
        if f[v[0]] == INF:
            v[0] = q
            continue
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = INF
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]
    return d


def distance_transform(mask: Mask) -> np.ndarray:
    """Exact Euclidean distance from every pixel to the nearest set pixel.

    Set pixels (binarized value 1, the subject region) get distance 0.
    Squared distances stay integer-valued through both passes, so the
    result matches a brute-force nearest-source scan bit for bit.
    """
    src = mask.binary()
    h, w = src.shape
    if not src.any():
        raise EmptyMaskError("mask has no set pixels to measure distance from")

    # pass 1: per column, squared row distance to the nearest source in
    # that column (vectorized up/down sweeps)
    INF = math.inf
    g = np.where(src, 0.0, INF)
    for i in range(1, h):
        row = g[i - 1] + 1.0
        np.minimum(g[i], row, out=g[i])
    for i in range(h - 2, -1, -1):
        row = g[i + 1] + 1.0
        np.minimum(g[i], row, out=g[i])
    g = g * g

    # pass 2: per row, lower envelope over columns
    out = np.empty((h, w), dtype=np.float64)
    for i in range(h):
        out[i] = _edt_1d_squared(g[i].tolist(), w)
    return np.sqrt(out).astype(np.float32)


def decay_blur(img: ImageBuffer, mask: Mask, kernel: Kernel, lam: float,
               normalization: str = "diagonal") -> ImageBuffer:
    """Blend blurred over original with weight exp(-lam * d_hat).

    d_hat is the distance-transform value, normalized by the image diagonal
    (normalization="diagonal", the default) or kept in raw pixels
    (normalization="pixels").  Inside the mask d_hat = 0, so the output
    equals the plain blur there and decays back to the original image with
    distance into the background.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if (mask.height, mask.width) != (img.height, img.width):
        raise ValueError(
            f"mask shape {(mask.height, mask.width)} does not match "
            f"image shape {(img.height, img.width)}"
        )
    if normalization not in ("diagonal", "pixels"):
        raise ValueError(f"unknown normalization {normalization!r}")

    blurred = gaussian_blur(img, kernel)
    dist = distance_transform(mask).astype(np.float64)
    if normalization == "diagonal":
        dist = dist / math.hypot(img.width, img.height)
    weight = np.exp(-lam * dist)[:, :, None]
    out = weight * blurred.data.astype(np.float64) \
        + (1.0 - weight) * img.data.astype(np.float64)
    return ImageBuffer(out.astype(np.float32))


def ssim(a: ImageBuffer, b: ImageBuffer, window: int = 8,
         c1: float = (0.01 * 1.0) ** 2, c2: float = (0.03 * 1.0) ** 2) -> float:
    """Mean local SSIM over all fully interior sliding windows (stride 1).

    Single-channel inputs on the [0, 1] range (L = 1); convert color
    images with to_luma first.  Window statistics use population moments.
    """
    if a.channels != 1 or b.channels != 1:
        raise ValueError("ssim expects single-channel images; convert via to_luma")
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(f"shape mismatch: {(a.height, a.width)} vs {(b.height, b.width)}")
    if a.height < window or a.width < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")

    x = a.data[:, :, 0].astype(np.float64)
    y = b.data[:, :, 0].astype(np.float64)
    win = (window, window)
    xs = np.lib.stride_tricks.sliding_window_view(x, win)
    ys = np.lib.stride_tricks.sliding_window_view(y, win)
    mu_x = xs.mean(axis=(2, 3))
    mu_y = ys.mean(axis=(2, 3))
    xx = (xs * xs).mean(axis=(2, 3))
    yy = (ys * ys).mean(axis=(2, 3))
    xy = (xs * ys).mean(axis=(2, 3))
    var_x = xx - mu_x * mu_x
    var_y = yy - mu_y * mu_y
    cov = xy - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.clip((num / den).mean(), -1.0, 1.0))


def to_luma(img: ImageBuffer) -> ImageBuffer:
    """Rec. 601 luma; single-channel input passes through unchanged."""
    if img.channels == 1:
        return img
    r, g, b = img.data[:, :, 0], img.data[:, :, 1], img.data[:, :, 2]
    luma = 0.299 * r.astype(np.float64) + 0.587 * g.astype(np.float64) \
        + 0.114 * b.astype(np.float64)
    return ImageBuffer(luma.astype(np.float32))


_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + tag + payload
            + struct.pack(">I", zlib.crc32(tag + payload)))


def encode_png(img: ImageBuffer, bit_depth: int = 16) -> bytes:
    """Quantize [0, 1] samples to 8- or 16-bit grayscale/RGB PNG bytes.

    Scanlines are written with filter type 0 and a fixed zlib level, so
    identical buffers always encode to identical bytes.
    """
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    data = np.clip(img.data.astype(np.float64), 0.0, 1.0)
    if bit_depth == 8:
        q = np.round(data * 255.0).astype(">u1")
    else:
        q = np.round(data * 65535.0).astype(">u2")
    h, w, channels = q.shape
    color_type = 0 if channels == 1 else 2
    rows = np.ascontiguousarray(q).reshape(h, -1).view(np.uint8)
    scan = np.zeros((h, 1 + rows.shape[1]), dtype=np.uint8)
    scan[:, 1:] = rows
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, color_type, 0, 0, 0)
    return (_PNG_MAGIC
            + _png_chunk(b"IHDR", ihdr)
            + _png_chunk(b"IDAT", zlib.compress(scan.tobytes(), 6))
            + _png_chunk(b"IEND", b""))


def write_png(img: ImageBuffer, path, bit_depth: int = 16) -> None:
    """encode_png to a file."""
    Path(path).write_bytes(encode_png(img, bit_depth=bit_depth))


def _png_unfilter(raw: bytes, h: int, stride: int, bpp: int) -> bytearray:
    """Reconstruct filtered scanlines (PNG filter types 0-4)."""
    out = bytearray(h * stride)
    prior = bytearray(stride)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        line = bytearray(raw[pos + 1:pos + 1 + stride])
        pos += 1 + stride
        if ftype == 1:  # Sub
            for i in range(bpp, stride):
                line[i] = (line[i] + line[i - bpp]) & 0xFF
        elif ftype == 2:  # Up
            for i in range(stride):
                line[i] = (line[i] + prior[i]) & 0xFF
        elif ftype == 3:  # Average
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                line[i] = (line[i] + ((left + prior[i]) >> 1)) & 0xFF
        elif ftype == 4:  # Paeth
            for i in range(stride):
                left = line[i - bpp] if i >= bpp else 0
                up = prior[i]
                up_left = prior[i - bpp] if i >= bpp else 0
                p = left + up - up_left
                pa, pb, pc = abs(p - left), abs(p - up), abs(p - up_left)
                if pa <= pb and pa <= pc:
                    pred = left
                elif pb <= pc:
                    pred = up
                else:
                    pred = up_left
                line[i] = (line[i] + pred) & 0xFF
        elif ftype != 0:
            raise ValueError(f"unknown PNG filter type {ftype}")
        out[y * stride:(y + 1) * stride] = line
        prior = line
    return out


def decode_png(blob: bytes) -> ImageBuffer:
    """Decode PNG bytes into [0, 1] float32 samples.

    Non-interlaced 8/16-bit grayscale and RGB files (everything this
    module writes) are decoded natively and losslessly; other variants
    fall back to Pillow's 8-bit conversion.
    """
    if blob[:8] != _PNG_MAGIC:
        raise ValueError("not a PNG byte stream")
    w, h, depth, color, _comp, _filt, interlace = struct.unpack(
        ">IIBBBBB", blob[16:16 + 13]
    )
    if depth in (8, 16) and color in (0, 2) and interlace == 0:
        idat = bytearray()
        pos = 8
        while pos < len(blob):
            (length,) = struct.unpack(">I", blob[pos:pos + 4])
            tag = blob[pos + 4:pos + 8]
            if tag == b"IDAT":
                idat += blob[pos + 8:pos + 8 + length]
            pos += 12 + length
        raw = zlib.decompress(bytes(idat))
        channels = 1 if color == 0 else 3
        bps = depth // 8
        stride = w * channels * bps
        bpp = channels * bps
        filters = raw[::stride + 1][:h]
        if all(f == 0 for f in filters):
            body = np.frombuffer(raw, dtype=np.uint8).reshape(h, stride + 1)[:, 1:]
            flat = np.ascontiguousarray(body)
        else:
            flat = np.frombuffer(bytes(_png_unfilter(raw, h, stride, bpp)),
                                 dtype=np.uint8).reshape(h, stride)
        if depth == 16:
            arr = flat.reshape(h, -1).view(">u2").astype(np.float64) / 65535.0
        else:
            arr = flat.astype(np.float64) / 255.0
        arr = arr.reshape(h, w, channels)
        if channels == 1:
            arr = arr[:, :, 0]
        return ImageBuffer(arr.astype(np.float32))
    pil = Image.open(io.BytesIO(blob))
    if pil.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(pil, dtype=np.float64) / 65535.0
    elif pil.mode == "L":
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    elif pil.mode == "RGB":
        arr = np.asarray(pil, dtype=np.float64) / 255.0
    else:
        arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    return ImageBuffer(arr.astype(np.float32))


def read_png(path) -> ImageBuffer:
    """decode_png from a file."""
    return decode_png(Path(path).read_bytes())
