"""Reference Vision Transformer: pure numpy, float64, deterministic.

Small by design: a DINOv2-flavored encoder (patch embed, CLS token, learned
positional encodings, pre-LN blocks with multi-head attention and a SwiGLU
MLP), mean pooling over the patch tokens only, and a Linear-BN-ReLU
projection head down to the unit hypersphere.

The last block's attention and QKV activations can be captured on the way
through, and the gradient of a cosine similarity with respect to those QKV
activations is available in closed form; both feed the attention heatmaps.

Weight tensors live in a flat binary container ("AVIT1", documented in
docs/formats.md) with a trailing CRC so truncated or bit-rotted files are
rejected up front.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError, StorageError

LN_EPS = 1e-6
BN_EPS = 1e-5
WEIGHTS_MAGIC = b"AVIT1"


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 252
    patch_size: int = 14
    hidden_dim: int = 384
    depth: int = 12
    heads: int = 6
    mlp_hidden: int = 1536
    proj_dims: tuple[int, int] = (512, 256)
    embed_dim: int = 128

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.hidden_dim, self.depth,
               self.heads, self.mlp_hidden, self.embed_dim) < 1 or min(self.proj_dims) < 1:
            raise ParameterError("all config dimensions must be positive")
        if self.image_size % self.patch_size != 0:
            raise ParameterError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.hidden_dim % self.heads != 0:
            raise ParameterError(f"hidden dim {self.hidden_dim} not divisible by {self.heads} heads")
        if len(self.proj_dims) != 2:
            raise ParameterError("projection head uses exactly two hidden layers")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads


FULL = VitConfig()
TINY = VitConfig(image_size=42, patch_size=14, hidden_dim=16, depth=2, heads=2,
                 mlp_hidden=64, proj_dims=(32, 16), embed_dim=8)


def tensor_spec(cfg: VitConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list defining both memory layout and file order."""
    h, m = cfg.hidden_dim, cfg.mlp_hidden
    spec = [
        ("patch_w", (h, 3 * cfg.patch_size * cfg.patch_size)),
        ("patch_b", (h,)),
        ("cls_token", (h,)),
        ("pos_embed", (cfg.num_patches + 1, h)),
    ]
    for i in range(cfg.depth):
        spec += [
            (f"b{i}.ln1_g", (h,)), (f"b{i}.ln1_b", (h,)),
            (f"b{i}.qkv_w", (h, 3 * h)), (f"b{i}.qkv_b", (3 * h,)),
            (f"b{i}.proj_w", (h, h)), (f"b{i}.proj_b", (h,)),
            (f"b{i}.ln2_g", (h,)), (f"b{i}.ln2_b", (h,)),
            (f"b{i}.gate_w", (h, m)), (f"b{i}.gate_b", (m,)),
            (f"b{i}.val_w", (h, m)), (f"b{i}.val_b", (m,)),
            (f"b{i}.out_w", (m, h)), (f"b{i}.out_b", (h,)),
        ]
    spec += [("ln_f_g", (h,)), ("ln_f_b", (h,))]
    d_in = h
    for j, d_out in enumerate(cfg.proj_dims):
        spec += [
            (f"h{j}.w", (d_in, d_out)), (f"h{j}.b", (d_out,)),
            (f"h{j}.bn_g", (d_out,)), (f"h{j}.bn_b", (d_out,)),
            (f"h{j}.bn_mean", (d_out,)), (f"h{j}.bn_var", (d_out,)),
        ]
        d_in = d_out
    spec += [("out.w", (d_in, cfg.embed_dim)), ("out.b", (cfg.embed_dim,))]
    return spec


@dataclass(frozen=True)
class VitWeights:
    cfg: VitConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        spec = tensor_spec(self.cfg)
        missing = [n for n, _ in spec if n not in self.tensors]
        if missing:
            raise FormatError(f"weights missing tensors: {missing[:3]}...")
        for name, shape in spec:
            t = self.tensors[name]
            if t.shape != shape:
                raise FormatError(f"tensor {name} has shape {t.shape}, expected {shape}")
        if np.any(self.tensors["h0.bn_var"] < 0) or np.any(self.tensors["h1.bn_var"] < 0):
            raise FormatError("BN variance must be non-negative")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def init_weights(cfg: VitConfig, seed: int = 0) -> VitWeights:
    """Seeded Gaussian init (std 0.02), identity norms, unit BN variance."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_spec(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g") or leaf == "bn_var":
            t = np.ones(shape)
        elif leaf.endswith("_b") or leaf == "b" or leaf == "bn_mean":
            t = np.zeros(shape)
        else:
            t = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = np.ascontiguousarray(t, dtype=np.float64)
    return VitWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# weights file I/O

_CONFIG_FIELDS = ("image_size", "patch_size", "hidden_dim", "depth", "heads",
                  "mlp_hidden", "proj0", "proj1", "embed_dim")


def save_weights(w: VitWeights, path) -> None:
    cfg = w.cfg
    header = WEIGHTS_MAGIC + struct.pack(
        "<9I", cfg.image_size, cfg.patch_size, cfg.hidden_dim, cfg.depth,
        cfg.heads, cfg.mlp_hidden, cfg.proj_dims[0], cfg.proj_dims[1], cfg.embed_dim,
    )
    chunks = [header]
    for name, _ in tensor_spec(cfg):
        chunks.append(w[name].astype("<f4").tobytes())
    body = b"".join(chunks)
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    try:
        Path(path).write_bytes(body)
    except OSError as exc:
        raise StorageError(f"cannot write weights to {path}: {exc}") from exc


def load_weights(path) -> VitWeights:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read weights {path}: {exc}") from exc
    if len(blob) < len(WEIGHTS_MAGIC) + 9 * 4 + 4:
        raise FormatError(f"weights file {path} too short for its header")
    if blob[:5] != WEIGHTS_MAGIC:
        raise FormatError(f"weights file {path} has bad magic {blob[:5]!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise FormatError(f"weights file {path} failed its checksum")
    vals = struct.unpack("<9I", blob[5 : 5 + 36])
    cfg = VitConfig(
        image_size=vals[0], patch_size=vals[1], hidden_dim=vals[2], depth=vals[3],
        heads=vals[4], mlp_hidden=vals[5], proj_dims=(vals[6], vals[7]), embed_dim=vals[8],
    )
    spec = tensor_spec(cfg)
    expected = sum(int(np.prod(s)) for _, s in spec) * 4
    payload = blob[5 + 36 : -4]
    if len(payload) != expected:
        raise FormatError(f"weights file {path}: {len(payload)} tensor bytes, config implies {expected}")
    tensors = {}
    offset = 0
    for name, shape in spec:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).astype(np.float64)
        tensors[name] = arr.reshape(shape)
        offset += n * 4
    return VitWeights(cfg, tensors)


# ---------------------------------------------------------------------------
# forward pieces

def _layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def _split_qkv(qkv: np.ndarray, cfg: VitConfig) -> np.ndarray:
    # (T, 3h) -> (3, heads, T, head_dim)
    t = qkv.shape[0]
    return qkv.reshape(t, 3, cfg.heads, cfg.head_dim).transpose(1, 2, 0, 3)


def _attention(qkv: np.ndarray, cfg: VitConfig) -> tuple[np.ndarray, np.ndarray]:
    """(concatenated head outputs (T, hidden), attention (heads, T, T))."""
    q, k, v = _split_qkv(qkv, cfg)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(cfg.head_dim)
    attn = _softmax(scores)
    out = attn @ v  # (heads, T, head_dim)
    merged = out.transpose(1, 0, 2).reshape(qkv.shape[0], cfg.hidden_dim)
    return merged, attn


def _block_qkv(x: np.ndarray, w: VitWeights, i: int) -> np.ndarray:
    return _layer_norm(x, w[f"b{i}.ln1_g"], w[f"b{i}.ln1_b"]) @ w[f"b{i}.qkv_w"] + w[f"b{i}.qkv_b"]


def _block_tail(qkv: np.ndarray, x_in: np.ndarray, w: VitWeights, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Rest of block i given its QKV activations: attention, proj, MLP, residuals."""
    cfg = w.cfg
    merged, attn = _attention(qkv, cfg)
    x1 = x_in + merged @ w[f"b{i}.proj_w"] + w[f"b{i}.proj_b"]
    ln2 = _layer_norm(x1, w[f"b{i}.ln2_g"], w[f"b{i}.ln2_b"])
    hidden = _silu(ln2 @ w[f"b{i}.gate_w"] + w[f"b{i}.gate_b"]) * (ln2 @ w[f"b{i}.val_w"] + w[f"b{i}.val_b"])
    x2 = x1 + hidden @ w[f"b{i}.out_w"] + w[f"b{i}.out_b"]
    return x2, attn


def _patch_tokens(tensor: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """(3, S, S) image -> (num_patches, 3*p*p) rows in (channel, py, px) order."""
    g, p = cfg.grid, cfg.patch_size
    x = tensor.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4)
    return x.reshape(g * g, 3 * p * p)


def _coerce_tensor(crop, cfg: VitConfig) -> np.ndarray:
    tensor = crop.tensor if hasattr(crop, "tensor") else np.asarray(crop)
    tensor = np.asarray(tensor, dtype=np.float64)
    want = (3, cfg.image_size, cfg.image_size)
    if tensor.shape != want:
        raise DimensionError(f"model expects input {want}, got {tensor.shape}")
    return tensor


def _head_forward(pooled: np.ndarray, w: VitWeights) -> np.ndarray:
    z = pooled
    for j in range(2):
        z = z @ w[f"h{j}.w"] + w[f"h{j}.b"]
        z = (z - w[f"h{j}.bn_mean"]) / np.sqrt(w[f"h{j}.bn_var"] + BN_EPS) * w[f"h{j}.bn_g"] + w[f"h{j}.bn_b"]
        z = np.maximum(z, 0.0)
    return z @ w["out.w"] + w["out.b"]


@dataclass
class AttentionCapture:
    """Final-block internals needed by the attention heatmaps."""

    attention: np.ndarray      # (heads, T, T) softmax rows
    cls_attention: np.ndarray  # (heads, num_patches): CLS row, CLS column dropped
    qkv: np.ndarray            # (T, 3*hidden) activations
    qkv_grad: np.ndarray | None = None
    similarity: float | None = None

    def __post_init__(self):
        rows = self.attention.sum(axis=-1)
        if np.max(np.abs(rows - 1.0)) > 1e-6:
            raise FormatError("attention rows must sum to 1")


def vit_raw_embedding(crop, w: VitWeights, capture: bool = False):
    """Pre-normalization embedding plus optional final-block capture."""
    cfg = w.cfg
    tensor = _coerce_tensor(crop, cfg)
    tokens = _patch_tokens(tensor, cfg) @ w["patch_w"].T + w["patch_b"]
    x = np.vstack([w["cls_token"][None, :], tokens]) + w["pos_embed"]
    cap = None
    for i in range(cfg.depth):
        qkv = _block_qkv(x, w, i)
        x_out, attn = _block_tail(qkv, x, w, i)
        if capture and i == cfg.depth - 1:
            cap = AttentionCapture(
                attention=attn, cls_attention=attn[:, 0, 1:].copy(), qkv=qkv,
            )
        x = x_out
    y = _layer_norm(x, w["ln_f_g"], w["ln_f_b"])
    pooled = y[1:].mean(axis=0)
    return _head_forward(pooled, w), cap


# ---------------------------------------------------------------------------
# gradient of a cosine similarity w.r.t. the final block's QKV activations

def _tail_similarity(qkv: np.ndarray, x_in: np.ndarray, w: VitWeights, centroid: np.ndarray) -> float:
    """Scalar the gradient is taken of; also the finite-difference target."""
    i = w.cfg.depth - 1
    x2, _ = _block_tail(qkv, x_in, w, i)
    y = _layer_norm(x2, w["ln_f_g"], w["ln_f_b"])
    pooled = y[1:].mean(axis=0)
    e = _head_forward(pooled, w)
    return float(e @ centroid / np.linalg.norm(e))


def _layer_norm_backward(x: np.ndarray, g: np.ndarray, dy: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * inv
    dxhat = dy * g
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def qkv_similarity_grad(qkv: np.ndarray, x_in: np.ndarray, w: VitWeights, centroid: np.ndarray) -> tuple[np.ndarray, float]:
    """Analytic d(cos similarity)/d(qkv); returns (grad, similarity)."""
    cfg = w.cfg
    i = cfg.depth - 1
    t = qkv.shape[0]

    # forward, keeping what the backward pass needs
    q, k, v = _split_qkv(qkv, cfg)
    scale = 1.0 / np.sqrt(cfg.head_dim)
    attn = _softmax(q @ k.transpose(0, 2, 1) * scale)
    merged = (attn @ v).transpose(1, 0, 2).reshape(t, cfg.hidden_dim)
    x1 = x_in + merged @ w[f"b{i}.proj_w"] + w[f"b{i}.proj_b"]
    ln2 = _layer_norm(x1, w[f"b{i}.ln2_g"], w[f"b{i}.ln2_b"])
    gate_pre = ln2 @ w[f"b{i}.gate_w"] + w[f"b{i}.gate_b"]
    val_pre = ln2 @ w[f"b{i}.val_w"] + w[f"b{i}.val_b"]
    sig = 1.0 / (1.0 + np.exp(-gate_pre))
    hidden = gate_pre * sig * val_pre
    x2 = x1 + hidden @ w[f"b{i}.out_w"] + w[f"b{i}.out_b"]
    y = _layer_norm(x2, w["ln_f_g"], w["ln_f_b"])
    pooled = y[1:].mean(axis=0)

    z0 = pooled
    head_cache = []
    z = z0
    for j in range(2):
        lin = z @ w[f"h{j}.w"] + w[f"h{j}.b"]
        bn = (lin - w[f"h{j}.bn_mean"]) / np.sqrt(w[f"h{j}.bn_var"] + BN_EPS) * w[f"h{j}.bn_g"] + w[f"h{j}.bn_b"]
        act = np.maximum(bn, 0.0)
        head_cache.append((z, bn))
        z = act
    e = z @ w["out.w"] + w["out.b"]
    norm = np.linalg.norm(e)
    e_hat = e / norm
    sim = float(e_hat @ centroid)

    # backward
    de = (centroid - sim * e_hat) / norm
    dz = de @ w["out.w"].T
    for j in (1, 0):
        z_in, bn = head_cache[j]
        dact = dz * (bn > 0)
        dlin = dact * w[f"h{j}.bn_g"] / np.sqrt(w[f"h{j}.bn_var"] + BN_EPS)
        dz = dlin @ w[f"h{j}.w"].T
    dpooled = dz

    dy = np.zeros_like(y)
    dy[1:] = dpooled / (t - 1)
    dx2 = _layer_norm_backward(x2, w["ln_f_g"], dy)

    dhidden = dx2 @ w[f"b{i}.out_w"].T
    dgate_pre = dhidden * val_pre * sig * (1.0 + gate_pre * (1.0 - sig))
    dval_pre = dhidden * gate_pre * sig
    dln2 = dgate_pre @ w[f"b{i}.gate_w"].T + dval_pre @ w[f"b{i}.val_w"].T
    dx1 = dx2 + _layer_norm_backward(x1, w[f"b{i}.ln2_g"], dln2)

    dmerged = dx1 @ w[f"b{i}.proj_w"].T
    dout_heads = dmerged.reshape(t, cfg.heads, cfg.head_dim).transpose(1, 0, 2)
    dattn = dout_heads @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dout_heads
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dq = dscores @ k * scale
    dk = dscores.transpose(0, 2, 1) @ q * scale

    dqkv = np.stack([dq, dk, dv])  # (3, heads, T, head_dim)
    dqkv = dqkv.transpose(2, 0, 1, 3).reshape(t, 3 * cfg.hidden_dim)
    return dqkv, sim
