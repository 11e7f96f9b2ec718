"""Standardize grain crops for the embedding model.

The contract: a padded square crop around the detection, background replaced
by slate gray (128/255), resized to 252x252, ImageNet-normalized to a
channel-major float32 tensor. Background pixels survive the whole chain as
exactly the normalized gray triple; after every resampling step the gray is
re-imposed wherever the resampled mask is clear, so interpolation cannot
bleed grain color into the background band.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .detect import GrainDetection, fill_contour
from .errors import DimensionError, GeometryError, ParameterError
from .raster import BinaryMask, Raster, resample_array

GRAY = 128.0 / 255.0
CROP_SIZE = 252


@dataclass(frozen=True)
class NormParams:
    mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise ParameterError(f"std must be strictly positive, got {self.std}")


@dataclass(frozen=True)
class NormalizedCrop:
    """Channel-major 3x252x252 float32 tensor ready for the embedder."""

    tensor: np.ndarray
    source_grain: Optional[tuple[str, int]] = None

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float32)
        if t.shape != (3, CROP_SIZE, CROP_SIZE):
            raise DimensionError(f"normalized crop must be 3x{CROP_SIZE}x{CROP_SIZE}, got {t.shape}")
        if not np.all(np.isfinite(t)):
            raise DimensionError("normalized crop contains non-finite values")
        t = np.ascontiguousarray(t)
        t.flags.writeable = False
        object.__setattr__(self, "tensor", t)


def gray_norm_triple(p: NormParams = NormParams()) -> np.ndarray:
    """Per-channel value the slate-gray background maps to after normalization."""
    return (GRAY - np.asarray(p.mean)) / np.asarray(p.std)


# ---------------------------------------------------------------------------
# crop / mask

def square_crop(
    img: Raster, grain: GrainDetection, pad_frac: float = 0.20
) -> tuple[Raster, BinaryMask]:
    """Gray-padded square crop around the grain plus its filled-contour mask.

    Side length is ceil(max(bbox side) * (1 + pad_frac)), centered on the
    bbox center; whatever falls outside the image is slate gray in the crop
    and clear in the mask.
    """
    if pad_frac < 0:
        raise ParameterError(f"pad_frac must be >= 0, got {pad_frac}")
    x, y, w, h = grain.bbox
    if x >= img.width or y >= img.height or x + w <= 0 or y + h <= 0:
        raise GeometryError(f"grain bbox {grain.bbox} lies outside the {img.width}x{img.height} image")
    side = int(math.ceil(max(w, h) * (1.0 + pad_frac)))
    x0 = int(math.floor(x + w / 2.0 - side / 2.0 + 0.5))
    y0 = int(math.floor(y + h / 2.0 - side / 2.0 + 0.5))

    crop = np.full((side, side, img.channels), GRAY, dtype=np.float64)
    mask = np.zeros((side, side), dtype=bool)
    full_mask = fill_contour(grain.contour, (img.height, img.width))

    sy0, sx0 = max(0, y0), max(0, x0)
    sy1, sx1 = min(img.height, y0 + side), min(img.width, x0 + side)
    if sy1 > sy0 and sx1 > sx0:
        crop[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = img.data[sy0:sy1, sx0:sx1]
        mask[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = full_mask[sy0:sy1, sx0:sx1]
    return Raster(crop), BinaryMask(mask)


def mask_background(crop: Raster, mask: BinaryMask) -> Raster:
    """Keep grain pixels, force everything where the mask is clear to gray."""
    if (crop.height, crop.width) != (mask.height, mask.width):
        raise DimensionError(
            f"crop {crop.height}x{crop.width} and mask {mask.height}x{mask.width} differ"
        )
    out = np.where(mask.bits[:, :, None], crop.data, GRAY)
    return Raster(out)


# ---------------------------------------------------------------------------
# normalization

def normalize(img: Raster, p: NormParams = NormParams(), source_grain=None) -> NormalizedCrop:
    """(x - mean) / std per channel, packed channel-major."""
    if img.channels != 3 or img.height != CROP_SIZE or img.width != CROP_SIZE:
        raise DimensionError(
            f"normalize expects a 3-channel {CROP_SIZE}x{CROP_SIZE} image, got "
            f"{img.channels}x{img.height}x{img.width}"
        )
    mean = np.asarray(p.mean).reshape(1, 1, 3)
    std = np.asarray(p.std).reshape(1, 1, 3)
    out = (img.data - mean) / std
    return NormalizedCrop(out.transpose(2, 0, 1).astype(np.float32), source_grain=source_grain)


def denormalize(crop: NormalizedCrop, p: NormParams = NormParams()) -> Raster:
    mean = np.asarray(p.mean).reshape(3, 1, 1)
    std = np.asarray(p.std).reshape(3, 1, 1)
    data = crop.tensor.astype(np.float64) * std + mean
    return Raster(np.clip(data.transpose(1, 2, 0), 0.0, 1.0))


def prepare_grain(
    img: Raster, grain: GrainDetection, p: NormParams = NormParams(), pad_frac: float = 0.20,
    source_grain=None,
) -> NormalizedCrop:
    """Crop, mask, resize to 252x252 and normalize one grain, deterministically."""
    crop, mask = square_crop(img, grain, pad_frac=pad_frac)
    masked = mask_background(crop, mask)
    data = resample_array(masked.data, CROP_SIZE, CROP_SIZE, "bilinear")
    bits = resample_array(mask.bits.astype(np.float64), CROP_SIZE, CROP_SIZE, "nearest") > 0.5
    data[~bits] = GRAY
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    return normalize(Raster(np.clip(data, 0.0, 1.0)), p, source_grain=source_grain)


# ---------------------------------------------------------------------------
# augmentation

def _affine_sample(img: np.ndarray, mask: np.ndarray, inv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pull-back sampling through the inverse map: bilinear image, nearest mask.

    Destination pixels whose source lands outside the grid become gray/clear.
    """
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx = xs - cx
    dy = ys - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + cx + inv[0, 2]
    sy = inv[1, 0] * dx + inv[1, 1] * dy + cy + inv[1, 2]
    supported = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)

    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.int64)
    x1 = np.clip(x0 + 1, 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    tx = np.clip(sx, 0, w - 1) - x0
    ty = np.clip(sy, 0, h - 1) - y0
    tx3 = tx[:, :, None]
    ty3 = ty[:, :, None]
    top = img[y0, x0] + tx3 * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + tx3 * (img[y1, x1] - img[y1, x0])
    out = top + ty3 * (bot - top)
    out[~supported] = GRAY

    nx = np.clip(np.rint(sx), 0, w - 1).astype(np.int64)
    ny = np.clip(np.rint(sy), 0, h - 1).astype(np.int64)
    mout = mask[ny, nx] & supported
    out[~mout] = GRAY
    return out, mout


def _rotation_inverse(theta_deg: float) -> np.ndarray:
    # positive angles turn the content counter-clockwise on screen
    r = math.radians(theta_deg)
    c, s = math.cos(r), math.sin(r)
    return np.array([[c, -s, 0.0], [s, c, 0.0]])


def augment(
    crop: Raster, mask: BinaryMask, ops, seed: int = 0
) -> tuple[Raster, BinaryMask]:
    """Apply geometric ops to image and mask in lockstep.

    Supported ops: "hflip", "vflip", ("rotate", deg), ("translate", dx, dy),
    ("random_rotate", lo, hi), ("random_translate", max_dx, max_dy). Random
    parameters are drawn from the seed, so a given (ops, seed) pair always
    produces the same output. Flips and exact quarter turns are pure index
    permutations; resampling ops gray out every pixel whose transformed mask
    is clear (including regions with no source support), so interpolation
    never bleeds grain color into the background.
    """
    if (crop.height, crop.width) != (mask.height, mask.width):
        raise DimensionError("crop and mask dimensions differ")
    rng = np.random.default_rng(seed)
    img = crop.data.copy()
    bits = mask.bits.copy()
    for op in ops:
        name = op if isinstance(op, str) else op[0]
        if name == "hflip":
            img = img[:, ::-1]
            bits = bits[:, ::-1]
        elif name == "vflip":
            img = img[::-1]
            bits = bits[::-1]
        elif name in ("rotate", "random_rotate"):
            if name == "rotate":
                theta = float(op[1])
            else:
                lo, hi = float(op[1]), float(op[2])
                if lo > hi:
                    raise ParameterError(f"random_rotate range has lo > hi: {op}")
                theta = float(rng.uniform(lo, hi))
            if not (-180.0 <= theta <= 180.0):
                raise ParameterError(f"rotation angle must be in [-180, 180], got {theta}")
            quarter = theta / 90.0
            if abs(quarter - round(quarter)) < 1e-9 and img.shape[0] == img.shape[1]:
                k = int(round(quarter)) % 4
                img = np.rot90(img, k)
                bits = np.rot90(bits, k)
            else:
                img, bits = _affine_sample(img, bits, _rotation_inverse(theta))
        elif name in ("translate", "random_translate"):
            if name == "translate":
                dx, dy = float(op[1]), float(op[2])
            else:
                mx, my = abs(float(op[1])), abs(float(op[2]))
                dx = float(rng.uniform(-mx, mx))
                dy = float(rng.uniform(-my, my))
            inv = np.array([[1.0, 0.0, -dx], [0.0, 1.0, -dy]])
            img, bits = _affine_sample(img, bits, inv)
        else:
            raise ParameterError(f"unknown augmentation op {op!r}")
    return Raster(np.clip(np.ascontiguousarray(img), 0.0, 1.0)), BinaryMask(np.ascontiguousarray(bits))
