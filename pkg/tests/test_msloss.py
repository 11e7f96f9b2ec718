import math

import numpy as np
import pytest

from pollengine.errors import ParameterError, PreconditionError
from pollengine.msloss import (
    Batch,
    MsParams,
    make_cluster_batch,
    ms_grad,
    ms_loss,
    toy_optimize,
)


def unit_rows(mat):
    mat = np.asarray(mat, dtype=np.float64)
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def random_batch(m, d, n_classes, seed):
    rng = np.random.default_rng(seed)
    e = unit_rows(rng.standard_normal((m, d)))
    return Batch(e, tuple(rng.integers(0, n_classes, m).tolist()))


def loss_formula(mat, labels, p):
    """The loss written out with explicit loops, for cross-checking."""
    mat = np.asarray(mat, dtype=np.float64)
    m = len(labels)
    total = 0.0
    for i in range(m):
        pos = 0.0
        neg = 0.0
        for k in range(m):
            if k == i:
                continue
            s = float(mat[i] @ mat[k]) / (np.linalg.norm(mat[i]) * np.linalg.norm(mat[k]))
            if labels[k] == labels[i]:
                pos += math.exp(-p.alpha * (s - p.lam))
            else:
                neg += math.exp(p.beta * (s - p.lam))
        total += math.log1p(pos) / p.alpha + math.log1p(neg) / p.beta
    return total / m


# --- parameters and batch ---------------------------------------------------

def test_default_params():
    p = MsParams()
    assert (p.alpha, p.beta, p.lam) == (2.0, 50.0, 0.5)


@pytest.mark.parametrize(
    "kwargs", [{"alpha": 0.0}, {"beta": -1.0}, {"lam": 1.0}, {"lam": -1.5}]
)
def test_param_validation(kwargs):
    with pytest.raises(ParameterError):
        MsParams(**kwargs)


def test_batch_requires_unit_rows():
    with pytest.raises(PreconditionError):
        Batch(np.ones((3, 4)), (0, 0, 1))


def test_batch_requires_two_rows_and_matching_labels():
    row = np.array([[1.0, 0.0]])
    with pytest.raises(PreconditionError):
        Batch(row, (0,))
    with pytest.raises(PreconditionError):
        Batch(np.vstack([row, row]), (0,))


def test_batch_embeddings_are_frozen():
    b = random_batch(4, 8, 2, 0)
    with pytest.raises(ValueError):
        b.embeddings[0, 0] = 5.0


# --- loss values ------------------------------------------------------------

def test_identical_pair_closed_form():
    e = np.zeros(4)
    e[0] = 1.0
    loss = ms_loss(Batch(np.stack([e, e]), (0, 0)))
    assert loss == pytest.approx(0.5 * math.log1p(math.exp(-1.0)), abs=1e-12)


def test_all_pairs_at_lambda_closed_form():
    # v_i = (u_i + w) / sqrt(2) with u_i, w orthonormal gives every
    # pairwise cosine exactly 0.5, which is exactly lambda
    basis = np.eye(5)
    rows = unit_rows((basis[:4] + basis[4]) / math.sqrt(2.0))
    sims = rows @ rows.T
    assert np.allclose(sims - np.diag(np.diag(sims)), 0.5 * (1 - np.eye(4)), atol=1e-12)
    p = MsParams()
    loss = ms_loss(Batch(rows, (0, 0, 1, 1)), p)
    per_anchor = math.log1p(1.0) / p.alpha + math.log1p(2.0) / p.beta
    assert loss == pytest.approx(per_anchor, abs=1e-9)


def test_one_positive_one_negative_closed_form():
    e0 = np.array([1.0, 0.0])
    e1 = np.array([0.0, 1.0])
    p = MsParams()
    loss = ms_loss(Batch(np.stack([e0, e0, e1]), (0, 0, 1)), p)
    b_anchor = 0.5 * math.log1p(math.exp(-1.0)) + 0.02 * math.log1p(math.exp(-25.0))
    b_lone = 0.02 * math.log1p(2.0 * math.exp(-25.0))
    assert loss == pytest.approx((2.0 * b_anchor + b_lone) / 3.0, abs=1e-12)
    assert b_anchor == pytest.approx(0.1566, abs=2e-4)


def test_loss_matches_looped_formula():
    for seed in range(4):
        b = random_batch(7, 10, 3, seed)
        assert ms_loss(b) == pytest.approx(loss_formula(b.embeddings, b.labels, MsParams()), abs=1e-10)


def test_loss_is_non_negative():
    for seed in range(10):
        assert ms_loss(random_batch(6, 5, 3, seed)) >= 0.0


def test_permutation_invariance():
    b = random_batch(9, 12, 3, 2)
    perm = np.random.default_rng(0).permutation(9)
    shuffled = Batch(b.embeddings[perm], tuple(b.labels[i] for i in perm))
    assert abs(ms_loss(b) - ms_loss(shuffled)) < 1e-10


# --- gradients --------------------------------------------------------------

def finite_difference(mat, labels, p, eps=1e-5):
    fd = np.zeros_like(mat)
    for i in range(mat.shape[0]):
        for j in range(mat.shape[1]):
            hi = mat.copy()
            hi[i, j] += eps
            lo = mat.copy()
            lo[i, j] -= eps
            fd[i, j] = (loss_formula(hi, labels, p) - loss_formula(lo, labels, p)) / (2 * eps)
    return fd


@pytest.mark.parametrize("seed", [7, 11])
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mat = unit_rows(rng.standard_normal((8, 16)))
    labels = tuple(rng.integers(0, 3, 8).tolist())
    g = ms_grad(Batch(mat, labels))
    fd = finite_difference(mat, labels, MsParams())
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_gradient_vanishes_for_coincident_single_class():
    e = np.zeros(6)
    e[2] = 1.0
    g = ms_grad(Batch(np.stack([e] * 4), (0, 0, 0, 0)))
    assert np.max(np.abs(g)) < 1e-9


def test_harder_negatives_weigh_more_as_beta_grows():
    rng = np.random.default_rng(3)
    mat = unit_rows(rng.standard_normal((6, 8)))
    labels = (0, 0, 0, 1, 1, 1)
    norms = [
        np.linalg.norm(ms_grad(Batch(mat, labels), MsParams(beta=beta)))
        for beta in (10.0, 30.0, 50.0)
    ]
    assert norms[0] < norms[1] < norms[2]


# --- toy optimizer ----------------------------------------------------------

def test_zero_steps_returns_input_unchanged():
    b = random_batch(4, 6, 2, 1)
    out, trace = toy_optimize(b, steps=0)
    assert out is b
    assert trace == []


def test_lr_validation():
    b = random_batch(4, 6, 2, 1)
    with pytest.raises(ParameterError):
        toy_optimize(b, lr=0.0)
    with pytest.raises(ParameterError):
        toy_optimize(b, steps=-1)


def test_cluster_fixture_separates():
    b = make_cluster_batch(4, 8, 16, 0.5, seed=1)
    final, trace = toy_optimize(b, lr=0.05, steps=500, seed=1)
    losses = [loss for loss, _ in trace]
    rhos = [rho for _, rho in trace]
    assert rhos[-1] > 3.0
    assert rhos[-1] > rhos[0]
    # non-increasing over every 10-step window
    assert all(b_ <= a + 1e-12 for a, b_ in zip(losses, losses[10:]))
    sims = final.embeddings @ final.embeddings.T
    lab = np.asarray(final.labels)
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    assert sims[same].mean() > 0.5
    assert sims[lab[:, None] != lab[None, :]].mean() < 0.5


def test_single_class_converges_to_merge_limit():
    p = MsParams()
    b = make_cluster_batch(1, 6, 8, 0.4, seed=3)
    _, trace = toy_optimize(b, p, lr=0.05, steps=400, seed=0)
    limit = math.log1p(5.0 * math.exp(-p.alpha * (1.0 - p.lam))) / p.alpha
    assert trace[-1][0] == pytest.approx(limit, abs=1e-3)
    assert math.isnan(trace[-1][1])  # no second class, no separation ratio


def test_coincident_opposite_labels_escape():
    e = np.zeros(8)
    e[0] = 1.0
    b = Batch(np.stack([e] * 4), (0, 0, 1, 1))
    final, trace = toy_optimize(b, lr=0.05, steps=500, seed=5)
    sims = final.embeddings @ final.embeddings.T
    assert sims[0, 2] < 0.5  # the classes actually came apart
    assert trace[-1][0] < trace[0][0]


def test_trace_has_one_entry_per_step():
    b = random_batch(6, 8, 2, 4)
    _, trace = toy_optimize(b, steps=25, seed=0)
    assert len(trace) == 25


# --- fixture builder --------------------------------------------------------

def test_cluster_batch_shape_and_labels():
    b = make_cluster_batch(3, 5, 12, 0.4, seed=0)
    assert b.size == 15
    assert b.dim == 12
    assert b.labels == (0,) * 5 + (1,) * 5 + (2,) * 5
    assert np.allclose(np.linalg.norm(b.embeddings, axis=1), 1.0)


def test_cluster_batch_zero_spread_collapses_each_class():
    b = make_cluster_batch(2, 3, 6, 0.0, seed=9)
    for c in (0, 1):
        rows = b.embeddings[np.asarray(b.labels) == c]
        assert np.allclose(rows, rows[0])


def test_cluster_batch_deterministic():
    a = make_cluster_batch(4, 8, 16, 0.5, seed=2)
    b = make_cluster_batch(4, 8, 16, 0.5, seed=2)
    assert np.array_equal(a.embeddings, b.embeddings)


def test_cluster_batch_validation():
    with pytest.raises(ParameterError):
        make_cluster_batch(classes=5, dim=4)
    with pytest.raises(ParameterError):
        make_cluster_batch(spread=2.0)
    with pytest.raises(ParameterError):
        make_cluster_batch(classes=0)
