"""Multi-similarity loss over a batch of unit embeddings.

The loss ties every anchor to all of its positives and negatives at once:

    L = (1/m) sum_i [ (1/a) log(1 + sum_{P_i} exp(-a (S_ik - lam)))
                    + (1/b) log(1 + sum_{N_i} exp( b (S_ik - lam))) ]

with S_ik the cosine similarity between rows (a plain dot product on the
unit sphere). ms_grad differentiates this exactly, treating rows as free
vectors; toy_optimize runs plain gradient descent with re-normalization
after every step so the batch stays on the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, PreconditionError
from .metrics import distance_ratio

UNIT_TOL = 1e-5

# exp() overflows around 709; on unit rows |arg| never exceeds beta * 1.5,
# so clamping at 60 is invisible in normal use but keeps malformed
# near-unit inputs finite
_EXP_CLAMP = 60.0


@dataclass(frozen=True)
class MsParams:
    alpha: float = 2.0
    beta: float = 50.0
    lam: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if self.beta <= 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if not -1.0 < self.lam < 1.0:
            raise ParameterError(f"lambda must lie in (-1, 1), got {self.lam}")


@dataclass(frozen=True)
class Batch:
    """m unit embeddings with integer class labels."""

    embeddings: np.ndarray
    labels: tuple

    def __post_init__(self):
        mat = np.array(self.embeddings, dtype=np.float64)
        if mat.ndim != 2 or mat.shape[0] < 2:
            raise PreconditionError(f"batch must be (m >= 2, d), got shape {mat.shape}")
        norms = np.linalg.norm(mat, axis=1)
        bad = np.abs(norms - 1.0) > UNIT_TOL
        if np.any(bad):
            raise PreconditionError(
                f"row {int(np.argmax(bad))} has norm {norms[bad][0]:.6f}, expected 1"
            )
        labels = tuple(int(v) for v in self.labels)
        if len(labels) != mat.shape[0]:
            raise PreconditionError(f"{mat.shape[0]} rows but {len(labels)} labels")
        mat.setflags(write=False)
        object.__setattr__(self, "embeddings", mat)
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def _pair_masks(labels: tuple):
    lab = np.asarray(labels)
    same = lab[:, None] == lab[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    return pos, ~same


def _loss_terms(mat: np.ndarray, labels: tuple, p: MsParams):
    """Cosine matrix plus the clamped pos/neg exponentials and their sums.

    Rows are normalized here rather than trusted, so the loss is a true
    function of direction only; its free-coordinate gradient is then
    tangential, which is what makes coincident same-class points a real
    stationary point.
    """
    unit = mat / np.linalg.norm(mat, axis=1, keepdims=True)
    sim = unit @ unit.T
    pos, neg = _pair_masks(labels)
    pos_exp = np.exp(np.clip(-p.alpha * (sim - p.lam), -_EXP_CLAMP, _EXP_CLAMP)) * pos
    neg_exp = np.exp(np.clip(p.beta * (sim - p.lam), -_EXP_CLAMP, _EXP_CLAMP)) * neg
    return unit, sim, pos_exp, neg_exp


def _loss_value(mat: np.ndarray, labels: tuple, p: MsParams) -> float:
    _, _, pos_exp, neg_exp = _loss_terms(mat, labels, p)
    brackets = np.log1p(pos_exp.sum(axis=1)) / p.alpha + np.log1p(neg_exp.sum(axis=1)) / p.beta
    return float(brackets.mean())


def ms_loss(batch: Batch, p: MsParams = MsParams()) -> float:
    return _loss_value(batch.embeddings, batch.labels, p)


def _grad_raw(mat: np.ndarray, labels: tuple, p: MsParams) -> np.ndarray:
    unit, sim, pos_exp, neg_exp = _loss_terms(mat, labels, p)
    m = mat.shape[0]
    # dL/dS_ik, one row per anchor; symmetrized because S_ik = S_ki appears
    # in both anchor i's bracket and anchor k's bracket
    w = (
        neg_exp / (1.0 + neg_exp.sum(axis=1))[:, None]
        - pos_exp / (1.0 + pos_exp.sum(axis=1))[:, None]
    ) / m
    w = w + w.T
    # dS_ik/de_i = (u_k - S_ik u_i) / |e_i|: the cosine only sees direction
    radial = np.sum(w * sim, axis=1)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return (w @ unit - radial[:, None] * unit) / norms


def ms_grad(batch: Batch, p: MsParams = MsParams()) -> np.ndarray:
    """Exact gradient of ms_loss with respect to every embedding coordinate."""
    return _grad_raw(batch.embeddings, batch.labels, p)


def toy_optimize(
    batch: Batch,
    p: MsParams = MsParams(),
    lr: float = 0.05,
    steps: int = 100,
    seed: int = 0,
):
    """Gradient descent on the sphere; returns (final batch, per-step trace).

    Each trace entry is (loss, rho) measured after the step; rho is NaN
    when the batch holds a single class. The seed only matters when the
    batch starts with coincident points from different classes: those sit
    at an unstable equilibrium (their push directions are parallel to the
    points themselves), so they get a tiny seeded jitter before the first
    step.
    """
    if lr <= 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if steps < 0:
        raise ParameterError(f"steps must be non-negative, got {steps}")
    if steps == 0:
        return batch, []

    mat = batch.embeddings.copy()
    labels = batch.labels
    multi_class = len(set(labels)) > 1

    rng = np.random.default_rng(seed)
    _, neg = _pair_masks(labels)
    coincident = np.all(mat[:, None, :] == mat[None, :, :], axis=2)
    stuck = np.any(coincident & neg, axis=1)
    if np.any(stuck):
        mat[stuck] += 1e-6 * rng.standard_normal((int(stuck.sum()), mat.shape[1]))
        mat[stuck] /= np.linalg.norm(mat[stuck], axis=1, keepdims=True)

    trace = []
    for _ in range(steps):
        mat = mat - lr * _grad_raw(mat, labels, p)
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
            raise NumericError("optimizer diverged: embedding norm collapsed")
        mat = mat / norms
        loss = _loss_value(mat, labels, p)
        if math.isnan(loss):
            raise NumericError("optimizer diverged: loss is NaN")
        rho = distance_ratio(mat, labels) if multi_class else math.nan
        trace.append((loss, rho))
    return Batch(mat, labels), trace


def make_cluster_batch(
    classes: int = 4,
    per_class: int = 8,
    dim: int = 16,
    spread: float = 0.5,
    seed: int = 0,
) -> Batch:
    """Points scattered up to `spread` radians around orthonormal class axes."""
    if classes < 1 or per_class < 1:
        raise ParameterError("need at least one class and one point per class")
    if dim < classes:
        raise ParameterError(f"dim {dim} cannot hold {classes} orthonormal directions")
    if not 0.0 <= spread < math.pi / 2:
        raise ParameterError(f"spread must lie in [0, pi/2), got {spread}")
    rng = np.random.default_rng(seed)
    axes, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    axes = axes.T[:classes]
    rows, labels = [], []
    for c in range(classes):
        mu = axes[c]
        for _ in range(per_class):
            tangent = rng.standard_normal(dim)
            tangent -= (tangent @ mu) * mu
            tangent /= np.linalg.norm(tangent)
            theta = spread * rng.random()
            rows.append(math.cos(theta) * mu + math.sin(theta) * tangent)
            labels.append(c)
    return Batch(np.stack(rows), tuple(labels))
