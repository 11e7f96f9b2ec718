"""Core pixel containers and the image math every downstream stage leans on.

Images are stored as float arrays in [0, 1], converted from 8-bit by /255.
All containers are immutable after construction and every operation is a
pure function, so batches can be processed from any number of threads.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, InputError, ParameterError, StorageError

SALIENCY_MAGIC = b"SAL1"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Raster:
    """Image with shape (height, width, channels), float values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise DimensionError(f"raster needs (h, w, 1|3) data, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError("raster must have at least one pixel")
        if not np.all(np.isfinite(arr)):
            raise InputError("raster contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InputError("raster values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def from_u8(cls, arr) -> "Raster":
        return cls(np.asarray(arr, dtype=np.float64) / 255.0)

    def to_u8(self) -> np.ndarray:
        """Quantize back to 8 bit: round(x * 255), clamped."""
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class SaliencyMap:
    """Per-pixel object probability, shape (height, width), values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"saliency map needs 2-d data, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InputError("saliency map contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InputError("saliency values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """Boolean grid with the same layout as the map it was derived from."""

    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.ndim != 2:
            raise DimensionError(f"mask needs 2-d data, got shape {arr.shape}")
        object.__setattr__(self, "bits", _freeze(arr.astype(bool)))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


# ---------------------------------------------------------------------------
# resampling

def _axis_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center convention: dst x maps to (x + 0.5) * n_in/n_out - 0.5
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def _lerp_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    src = _axis_coords(n_out, n_in)
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    lo = np.clip(i0, 0, n_in - 1)
    hi = np.clip(i0 + 1, 0, n_in - 1)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    # lerp form keeps constants exactly constant
    return a + t * (b - a)


def _cubic_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    # Catmull-Rom (a = -0.5) written as a cubic Hermite with centered-difference
    # tangents; exact for constant input, edge samples replicated.
    n_in = arr.shape[axis]
    src = _axis_coords(n_out, n_in)
    i1 = np.floor(src).astype(np.int64)
    t = src - i1
    taps = [np.take(arr, np.clip(i1 + k, 0, n_in - 1), axis=axis) for k in (-1, 0, 1, 2)]
    p0, p1, p2, p3 = taps
    shape = [1] * arr.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    m1 = (p2 - p0) * 0.5
    m2 = (p3 - p1) * 0.5
    d = p2 - p1
    return p1 + t * (m1 + t * ((3.0 * d - 2.0 * m1 - m2) + t * (m1 + m2 - 2.0 * d)))


def _nearest_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    idx = np.clip(np.floor(_axis_coords(n_out, n_in) + 0.5).astype(np.int64), 0, n_in - 1)
    return np.take(arr, idx, axis=axis)


_AXIS_FNS = {"bilinear": _lerp_axis, "bicubic": _cubic_axis, "nearest": _nearest_axis}


def resample_array(arr: np.ndarray, out_w: int, out_h: int, method: str, clamp=None) -> np.ndarray:
    """Resize a (h, w) or (h, w, c) float array; separable, edge-replicated."""
    if out_w < 1 or out_h < 1:
        raise DimensionError(f"target size must be positive, got {out_w}x{out_h}")
    if method not in _AXIS_FNS:
        raise ParameterError(f"unknown resize method {method!r}")
    fn = _AXIS_FNS[method]
    out = fn(np.asarray(arr, dtype=np.float64), out_w, axis=1)
    out = fn(out, out_h, axis=0)
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


def resize(img: Raster, out_w: int, out_h: int, method: str = "bilinear") -> Raster:
    """Resize an image with bilinear or bicubic (Catmull-Rom) filtering.

    Bicubic output is clamped to [0, 1] since the kernel can overshoot.
    """
    if method not in ("bilinear", "bicubic"):
        raise ParameterError(f"resize method must be bilinear or bicubic, got {method!r}")
    clamp = (0.0, 1.0) if method == "bicubic" else None
    return Raster(resample_array(img.data, out_w, out_h, method, clamp=clamp))


def resize_mask_nearest(mask: BinaryMask, out_w: int, out_h: int) -> BinaryMask:
    """Nearest-neighbor mask resize; keeps the mask strictly binary."""
    out = resample_array(mask.bits.astype(np.float64), out_w, out_h, "nearest")
    return BinaryMask(out > 0.5)


# ---------------------------------------------------------------------------
# blur / focus

def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _convolve_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    n = arr.shape[axis]
    # reflect-101 padding; radius must stay below the axis length
    pad_r = min(radius, n - 1)
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (pad_r, pad_r)
    if pad_r < radius:
        kernel = kernel[radius - pad_r : radius + pad_r + 1]
        kernel = kernel / kernel.sum()
        radius = pad_r
    padded = np.pad(arr, pad, mode="reflect")
    out = np.zeros_like(arr)
    for k in range(2 * radius + 1):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(k, k + n)
        out += kernel[k] * padded[tuple(sl)]
    return out


def gaussian_blur(img: Raster, sigma: float) -> Raster:
    """Separable Gaussian blur with reflective borders; sigma 0 is a no-op."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    kernel = _gaussian_kernel(sigma)
    out = _convolve_axis(img.data, kernel, axis=1)
    out = _convolve_axis(out, kernel, axis=0)
    return Raster(np.clip(out, 0.0, 1.0))


def to_gray(img: Raster) -> Raster:
    """Collapse RGB to a single channel by the channel mean."""
    if img.channels == 1:
        return img
    return Raster(img.data.mean(axis=2))


def laplacian_response(img: Raster) -> np.ndarray:
    """3x3 four-neighbor Laplacian (center -4), reflective borders."""
    if img.channels != 1:
        raise DimensionError("laplacian needs a single-channel image")
    if img.height < 3 or img.width < 3:
        raise DimensionError("laplacian needs at least a 3x3 image")
    a = img.data[:, :, 0]
    p = np.pad(a, 1, mode="reflect")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * a


def laplacian_variance(img: Raster) -> float:
    """Variance of the Laplacian response; the focus score (0 for flat fields)."""
    return float(np.var(laplacian_response(img)))


def best_focus(stack: list[Raster]) -> int:
    """Index of the sharpest image in a z-stack; ties go to the lowest index."""
    if not stack:
        raise InputError("focus stack is empty")
    scores = [laplacian_variance(to_gray(img)) for img in stack]
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# file I/O

def load_image(path) -> Raster:
    """Load a PNG (via Pillow) or the documented raw format (.raw)."""
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"image file not found: {path}")
    if path.suffix.lower() == ".raw":
        return read_raw(path)
    from PIL import Image

    try:
        with Image.open(path) as im:
            if im.mode in ("1", "I", "I;16", "LA"):
                im = im.convert("L")
            elif im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise StorageError(f"cannot decode image {path}: {exc}") from exc
    return Raster.from_u8(arr)


def save_png(img: Raster, path) -> None:
    from PIL import Image

    arr = img.to_u8()
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    try:
        Image.fromarray(arr).save(Path(path), format="PNG")
    except OSError as exc:
        raise StorageError(f"cannot write PNG {path}: {exc}") from exc


def read_raw(path) -> Raster:
    """Read the raw 8-bit format: u32le width, u32le height, u32le channels, bytes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 12:
        raise FormatError(f"raw image {path} shorter than its 12-byte header")
    w, h, c = struct.unpack("<III", blob[:12])
    if c not in (1, 3):
        raise FormatError(f"raw image {path} declares {c} channels (need 1 or 3)")
    expected = w * h * c
    if len(blob) - 12 != expected:
        raise FormatError(f"raw image {path}: expected {expected} pixel bytes, found {len(blob) - 12}")
    arr = np.frombuffer(blob, dtype=np.uint8, offset=12).reshape(h, w, c)
    return Raster.from_u8(arr)


def write_raw(img: Raster, path) -> None:
    arr = img.to_u8()
    header = struct.pack("<III", img.width, img.height, img.channels)
    try:
        Path(path).write_bytes(header + arr.tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_saliency(path) -> SaliencyMap:
    """Load a saliency map: grayscale PNG or raw float32 ("SAL1" header)."""
    path = Path(path)
    if not path.is_file():
        raise StorageError(f"saliency file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] == SALIENCY_MAGIC:
        if len(blob) < 12:
            raise FormatError(f"saliency file {path} shorter than its 12-byte header")
        w, h = struct.unpack("<II", blob[4:12])
        expected = w * h * 4
        if len(blob) - 12 != expected:
            raise FormatError(f"saliency file {path}: expected {expected} payload bytes, found {len(blob) - 12}")
        values = np.frombuffer(blob, dtype="<f4", offset=12).astype(np.float64).reshape(h, w)
        return SaliencyMap(values)
    img = load_image(path)
    if img.channels != 1:
        img = to_gray(img)
    return SaliencyMap(img.data[:, :, 0])


def write_saliency(sal: SaliencyMap, path) -> None:
    header = SALIENCY_MAGIC + struct.pack("<II", sal.width, sal.height)
    payload = sal.values.astype("<f4").tobytes()
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
