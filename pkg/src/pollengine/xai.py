"""Gradient-weighted attention heatmaps.

Takes a forward capture (attention rows plus the similarity gradient on
the final QKV activations), weights each head's CLS-to-patch attention by
the mean absolute gradient inside that head's QKV slice, and upsamples
the weighted grid back to crop resolution as a [0, 1] heatmap.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import raster
from .errors import DimensionError, PreconditionError
from .prep import NormalizedCrop, denormalize
from .vit import AttentionCapture, VitConfig


@dataclass(frozen=True)
class Heatmap:
    """Normalized attention relevance at crop resolution."""

    grid: np.ndarray
    grain_id: int = 0

    def __post_init__(self):
        arr = np.asarray(self.grid, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"heatmap grid must be 2-d, got shape {arr.shape}")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise DimensionError("heatmap values must lie in [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "grid", arr)


def cls_attention_map(cap: AttentionCapture, cfg: VitConfig) -> np.ndarray:
    """Per-head CLS attention over patches as (heads, grid, grid)."""
    heads, n = cap.cls_attention.shape
    if heads != cfg.heads or n != cfg.num_patches:
        raise DimensionError(
            f"capture is {heads} heads x {n} patches, config wants "
            f"{cfg.heads} x {cfg.num_patches}"
        )
    return cap.cls_attention.reshape(heads, cfg.grid, cfg.grid)


def head_weights(cap: AttentionCapture) -> np.ndarray:
    """Mean absolute similarity gradient inside each head's QKV slice.

    The (T, 3*hidden) gradient is laid out as [q | k | v]; head j owns
    columns [j*hd, (j+1)*hd) within each of the three thirds.
    """
    if cap.qkv_grad is None:
        raise PreconditionError("capture carries no QKV gradient; run a similarity pass")
    heads = cap.attention.shape[0]
    hidden = cap.qkv.shape[1] // 3
    if hidden % heads:
        raise DimensionError(f"hidden dim {hidden} does not divide into {heads} heads")
    hd = hidden // heads
    weights = np.empty(heads)
    for j in range(heads):
        cols = np.concatenate(
            [np.arange(part * hidden + j * hd, part * hidden + (j + 1) * hd) for part in range(3)]
        )
        weights[j] = np.mean(np.abs(cap.qkv_grad[:, cols]))
    return weights


def weighted_heatmap(cap: AttentionCapture, cfg: VitConfig, grain_id: int = 0) -> Heatmap:
    """Head-weighted CLS attention, bicubic-upsampled and min-max normalized."""
    maps = cls_attention_map(cap, cfg)
    weights = head_weights(cap)
    combined = np.tensordot(weights, maps, axes=1)
    up = raster.resample_array(combined, cfg.image_size, cfg.image_size, "bicubic")
    span = up.max() - up.min()
    if span < 1e-9:
        return Heatmap(np.zeros_like(up), grain_id)
    return Heatmap((up - up.min()) / span, grain_id)


# ---------------------------------------------------------------------------
# file output

def heatmap_filename(image_name: str, grain_id: int) -> str:
    return f"{Path(image_name).stem}.{grain_id}.heatmap.png"


def overlay_filename(image_name: str, grain_id: int) -> str:
    return f"{Path(image_name).stem}.{grain_id}.overlay.png"


def _crop_rgb(crop) -> np.ndarray:
    if isinstance(crop, NormalizedCrop):
        return denormalize(crop).data
    arr = np.asarray(crop, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3:
        arr = np.transpose(arr, (1, 2, 0))
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an RGB crop, got shape {arr.shape}")
    return np.clip(arr, 0.0, 1.0)


def blend_overlay(hm: Heatmap, crop, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the colorized heatmap onto the source crop (RGB [0, 1])."""
    import matplotlib

    rgb = _crop_rgb(crop)
    if hm.grid.shape != rgb.shape[:2]:
        raise DimensionError(
            f"heatmap {hm.grid.shape} does not cover crop {rgb.shape[:2]}"
        )
    colored = matplotlib.colormaps["inferno"](hm.grid)[:, :, :3]
    return (1.0 - alpha) * rgb + alpha * colored


def write_heatmap_files(hm: Heatmap, crop, image_name: str, out_dir) -> tuple[Path, Path]:
    """Write the grayscale heatmap and its overlay; returns both paths."""
    out_dir = Path(out_dir)
    heat_path = out_dir / heatmap_filename(image_name, hm.grain_id)
    over_path = out_dir / overlay_filename(image_name, hm.grain_id)
    raster.save_png(raster.Raster(hm.grid), heat_path)
    raster.save_png(raster.Raster(blend_overlay(hm, crop)), over_path)
    return heat_path, over_path
