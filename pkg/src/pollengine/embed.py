"""Unit-hypersphere embeddings and the pluggable backends that produce them.

Three backends share one contract (every embedding leaves with unit norm):
a deterministic hash-seeded mock for tests and plumbing, the in-process
reference transformer, and a line-oriented JSON adapter for an external
embedding server.
"""
from __future__ import annotations

import base64
import hashlib
import json
import socket
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateInputError,
    EmbedDimensionError,
    EmbedTimeoutError,
    InputError,
    PreconditionError,
    ProtocolError,
    TransportError,
)
from .vit import AttentionCapture, VitWeights, qkv_similarity_grad, vit_raw_embedding
from . import vit as _vit

DEFAULT_DIM = 128
UNIT_TOL = 1e-5


@dataclass(frozen=True)
class Embedding:
    """Point on the unit hypersphere; 128-d by default."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise InputError(f"embedding must be a vector of dim >= 2, got shape {v.shape}")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > UNIT_TOL:
            raise InputError(f"embedding norm {norm} deviates from 1 by more than {UNIT_TOL}")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return int(self.values.size)


def l2_normalize(v) -> np.ndarray:
    """v / ||v||; refuses vectors too short to carry a direction."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        raise DegenerateInputError(f"cannot normalize a vector of norm {norm}")
    return v / norm


def sphere_distance_identity_check(a, b) -> tuple[float, float]:
    """(squared Euclidean distance, cosine) for two unit vectors.

    On the unit sphere these are tied together: d^2 = 2 (1 - cos).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for name, v in (("first", a), ("second", b)):
        if abs(float(np.linalg.norm(v)) - 1.0) > UNIT_TOL:
            raise PreconditionError(f"{name} argument is not unit norm")
    diff = a - b
    return float(diff @ diff), float(a @ b)


def mock_embed(crop, dim: int = DEFAULT_DIM, seed: int = 0) -> Embedding:
    """Deterministic stand-in: hash the tensor bytes into a Gaussian direction.

    Any single-byte change in the input flips the hash and with it the whole
    vector; identical inputs always embed identically.
    """
    if dim < 2:
        raise InputError(f"embedding dim must be >= 2, got {dim}")
    tensor = crop.tensor if hasattr(crop, "tensor") else np.asarray(crop, dtype=np.float32)
    digest = hashlib.blake2b(
        np.ascontiguousarray(tensor, dtype=np.float32).tobytes()
        + int(seed).to_bytes(8, "little", signed=True),
        digest_size=16,
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return Embedding(l2_normalize(rng.normal(size=dim)))


def vit_forward(crop, weights: VitWeights, capture: bool = False):
    """Embed through the reference transformer; optionally keep the last
    block's attention and QKV for the heatmap stage."""
    raw, cap = vit_raw_embedding(crop, weights, capture=capture)
    emb = Embedding(l2_normalize(raw))
    return (emb, cap) if capture else emb


def vit_similarity_grad(crop, weights: VitWeights, centroid: Embedding) -> AttentionCapture:
    """Capture with the gradient of cos(embedding, centroid) w.r.t. the
    final block's QKV activations filled in."""
    if not isinstance(centroid, Embedding):
        vec = np.asarray(centroid, dtype=np.float64)
        if abs(float(np.linalg.norm(vec)) - 1.0) > UNIT_TOL:
            raise PreconditionError("centroid must be a unit vector")
        centroid = Embedding(vec)
    cfg = weights.cfg
    tensor = _vit._coerce_tensor(crop, cfg)
    tokens = _vit._patch_tokens(tensor, cfg) @ weights["patch_w"].T + weights["patch_b"]
    x = np.vstack([weights["cls_token"][None, :], tokens]) + weights["pos_embed"]
    for i in range(cfg.depth - 1):
        qkv = _vit._block_qkv(x, weights, i)
        x, _ = _vit._block_tail(qkv, x, weights, i)
    qkv = _vit._block_qkv(x, weights, cfg.depth - 1)
    grad, sim = qkv_similarity_grad(qkv, x, weights, centroid.values)
    _, attn = _vit._attention(qkv, cfg)
    return AttentionCapture(
        attention=attn,
        cls_attention=attn[:, 0, 1:].copy(),
        qkv=qkv,
        qkv_grad=grad,
        similarity=sim,
    )


# ---------------------------------------------------------------------------
# external process adapter

def external_embed(crop, endpoint: str, dim: int = DEFAULT_DIM, timeout: float = 30.0) -> Embedding:
    """Request one embedding from host:port speaking the line-JSON protocol."""
    tensor = crop.tensor if hasattr(crop, "tensor") else np.asarray(crop, dtype=np.float32)
    tensor = np.ascontiguousarray(tensor, dtype="<f4")
    request = {
        "id": 0,
        "shape": list(tensor.shape),
        "data": base64.b64encode(tensor.tobytes()).decode("ascii"),
    }
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise TransportError(f"endpoint must look like host:port, got {endpoint!r}")
    try:
        with socket.create_connection((host, int(port)), timeout=timeout) as conn:
            conn.settimeout(timeout)
            conn.sendall((json.dumps(request) + "\n").encode("utf-8"))
            chunks = []
            while True:
                buf = conn.recv(65536)
                if not buf:
                    break
                chunks.append(buf)
                if b"\n" in buf:
                    break
    except socket.timeout as exc:
        raise EmbedTimeoutError(f"embedder at {endpoint} timed out after {timeout}s") from exc
    except OSError as exc:
        raise TransportError(f"cannot reach embedder at {endpoint}: {exc}") from exc

    line = b"".join(chunks).split(b"\n", 1)[0]
    if not line:
        raise ProtocolError(f"embedder at {endpoint} closed the connection without replying")
    try:
        reply = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"embedder reply is not valid JSON: {exc}") from exc
    if not isinstance(reply, dict) or "embedding" not in reply:
        raise ProtocolError("embedder reply lacks an 'embedding' field")
    if reply.get("id") != request["id"]:
        raise ProtocolError(f"embedder reply id {reply.get('id')!r} does not match request id 0")
    vec = np.asarray(reply["embedding"], dtype=np.float64)
    if vec.ndim != 1 or vec.size != dim:
        raise EmbedDimensionError(f"embedder returned {vec.size} floats, expected {dim}")
    return Embedding(l2_normalize(vec))


# ---------------------------------------------------------------------------
# uniform backend objects for the pipeline / CLI

class MockEmbedder:
    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def __call__(self, crop) -> Embedding:
        return mock_embed(crop, dim=self.dim, seed=self.seed)


class VitEmbedder:
    def __init__(self, weights: VitWeights):
        self.weights = weights
        self.dim = weights.cfg.embed_dim

    def __call__(self, crop) -> Embedding:
        return vit_forward(crop, self.weights)

    def capture(self, crop):
        return vit_forward(crop, self.weights, capture=True)

    def similarity_grad(self, crop, centroid: Embedding) -> AttentionCapture:
        return vit_similarity_grad(crop, self.weights, centroid)


class ExternalEmbedder:
    def __init__(self, endpoint: str, dim: int = DEFAULT_DIM, timeout: float = 30.0):
        self.endpoint = endpoint
        self.dim = dim
        self.timeout = timeout

    def __call__(self, crop) -> Embedding:
        return external_embed(crop, self.endpoint, dim=self.dim, timeout=self.timeout)
