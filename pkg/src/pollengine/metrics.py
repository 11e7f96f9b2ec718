"""Embedding-space analytics.

Centroid fitting and nearest-centroid classification, retrieval metrics
(Recall@K, mAP@R), clustering agreement (k-means + NMI), the separation
ratio rho, leave-one-out kNN confusion, and per-class spread statistics.
All distances are Euclidean; on unit vectors they stay within [0, 2].
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import Embedding, l2_normalize
from .errors import (
    DimensionError,
    InputError,
    NumericError,
    ParameterError,
    ParseError,
)

UNIT_TOL = 1e-5


def _as_matrix(embeddings) -> np.ndarray:
    """Stack a sequence of Embedding objects or coerce an (n, d) array."""
    if len(embeddings) and isinstance(embeddings[0], Embedding):
        mat = np.stack([e.values for e in embeddings])
    else:
        mat = np.asarray(embeddings, dtype=np.float64)
    if mat.ndim != 2:
        raise DimensionError(f"expected an (n, d) embedding matrix, got shape {mat.shape}")
    return mat


def pairwise_distances(embeddings) -> np.ndarray:
    """Full n x n Euclidean distance matrix."""
    mat = _as_matrix(embeddings)
    sq = np.sum(mat * mat, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (mat @ mat.T)
    np.fill_diagonal(d2, 0.0)  # exact zero; the expansion leaves fp residue
    return np.sqrt(np.clip(d2, 0.0, None))


def _class_order(labels):
    return tuple(sorted(set(labels)))


# ---------------------------------------------------------------------------
# centroids and classification

@dataclass(frozen=True)
class CentroidSet:
    """Per-class unit centroids in a fixed class order."""

    classes: tuple
    centroids: np.ndarray
    counts: tuple

    def __post_init__(self):
        classes = tuple(self.classes)
        object.__setattr__(self, "classes", classes)
        if len(set(classes)) != len(classes):
            raise InputError("class names must be unique")
        if not classes:
            raise InputError("CentroidSet needs at least one class")
        cent = np.asarray(self.centroids, dtype=np.float64)
        if cent.ndim != 2 or cent.shape[0] != len(classes):
            raise DimensionError(
                f"centroids must be ({len(classes)}, d), got shape {cent.shape}"
            )
        norms = np.linalg.norm(cent, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise InputError("every centroid must be unit norm")
        cent.setflags(write=False)
        object.__setattr__(self, "centroids", cent)
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != len(classes) or any(c < 1 for c in counts):
            raise InputError("counts must hold one positive integer per class")
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def centroid(self, class_name) -> np.ndarray:
        try:
            return self.centroids[self.classes.index(class_name)]
        except ValueError:
            raise InputError(f"unknown class {class_name!r}") from None


@dataclass(frozen=True)
class Prediction:
    class_name: object
    distance: float
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.distance <= 2.0 + 1e-9:
            raise InputError(f"distance {self.distance} outside [0, 2]")
        if not 0.0 <= self.confidence <= 1.0 + 1e-12:
            raise InputError(f"confidence {self.confidence} outside [0, 1]")


def fit_centroids(embeddings, labels, classes=None) -> CentroidSet:
    """Average each class and project the mean back onto the unit sphere."""
    mat = _as_matrix(embeddings)
    labels = list(labels)
    if len(labels) != mat.shape[0]:
        raise InputError(f"{mat.shape[0]} embeddings but {len(labels)} labels")
    order = _class_order(labels) if classes is None else tuple(classes)
    cents, counts = [], []
    for name in order:
        rows = mat[[i for i, lab in enumerate(labels) if lab == name]]
        if rows.shape[0] == 0:
            raise InputError(f"class {name!r} has no samples")
        cents.append(l2_normalize(rows.mean(axis=0)))
        counts.append(rows.shape[0])
    return CentroidSet(order, np.stack(cents), tuple(counts))


def class_confidences(e, cs: CentroidSet, tau: float = 0.1) -> dict:
    """Softmin confidence over centroid distances; values sum to 1."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    vec = e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
    if vec.shape != (cs.dim,):
        raise DimensionError(f"embedding dim {vec.shape} does not match centroids ({cs.dim},)")
    dists = np.linalg.norm(cs.centroids - vec[None, :], axis=1)
    w = np.exp(-(dists - dists.min()) / tau)
    w /= w.sum()
    return dict(zip(cs.classes, w))


def classify(e, cs: CentroidSet, tau: float = 0.1) -> Prediction:
    """Nearest-centroid prediction; ties go to the earlier class in order."""
    vec = e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64)
    if vec.shape != (cs.dim,):
        raise DimensionError(f"embedding dim {vec.shape} does not match centroids ({cs.dim},)")
    dists = np.linalg.norm(cs.centroids - vec[None, :], axis=1)
    idx = int(np.argmin(dists))
    conf = class_confidences(vec, cs, tau)[cs.classes[idx]]
    return Prediction(cs.classes[idx], float(dists[idx]), float(conf))


# ---------------------------------------------------------------------------
# retrieval metrics

def _neighbor_ranks(dmat: np.ndarray) -> np.ndarray:
    """Per-query neighbor indices, ascending distance, self excluded.

    Equal distances keep index order (stable sort), so results do not
    depend on floating-point argsort quirks.
    """
    n = dmat.shape[0]
    d = dmat.copy()
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, : n - 1]


def recall_at_k(embeddings, labels, ks) -> dict:
    """Fraction of queries with a same-label neighbor in the top K."""
    mat = _as_matrix(embeddings)
    labels = np.asarray(list(labels), dtype=object)
    n = mat.shape[0]
    if n < 2:
        raise InputError("recall needs at least two samples")
    ks = [int(k) for k in ks]
    for k in ks:
        if k < 1 or k >= n:
            raise ParameterError(f"K must satisfy 1 <= K <= n-1, got K={k} with n={n}")
    ranks = _neighbor_ranks(pairwise_distances(mat))
    hits = labels[ranks] == labels[:, None]
    return {k: float(np.mean(np.any(hits[:, :k], axis=1))) for k in ks}


def map_at_r(embeddings, labels, return_skipped: bool = False):
    """Mean average precision at R, where R is the same-class count minus one.

    Queries from singleton classes have R = 0 and are skipped; pass
    return_skipped=True to also get how many were.
    """
    mat = _as_matrix(embeddings)
    labels = np.asarray(list(labels), dtype=object)
    if mat.shape[0] < 2:
        raise InputError("mAP@R needs at least two samples")
    ranks = _neighbor_ranks(pairwise_distances(mat))
    hits = (labels[ranks] == labels[:, None]).astype(np.float64)
    scores, skipped = [], 0
    for i in range(mat.shape[0]):
        r = int(np.sum(labels == labels[i])) - 1
        if r == 0:
            skipped += 1
            continue
        rel = hits[i, :r]
        precision = np.cumsum(rel) / np.arange(1, r + 1)
        scores.append(float(np.sum(precision * rel) / r))
    if not scores:
        raise InputError("every class is a singleton; mAP@R is undefined")
    value = float(np.mean(scores))
    return (value, skipped) if return_skipped else value


# ---------------------------------------------------------------------------
# clustering quality

def kmeans(embeddings, k: int, seed: int = 0, max_iter: int = 300, history=None) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; deterministic given seed.

    history, if given, collects the inertia after each iteration.
    """
    mat = _as_matrix(embeddings)
    n = mat.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k must satisfy 1 <= k <= n, got k={k} with n={n}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, mat.shape[1]))
    centers[0] = mat[rng.integers(n)]
    closest = np.sum((mat - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[j] = mat[rng.integers(n)]
        else:
            centers[j] = mat[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, np.sum((mat - centers[j]) ** 2, axis=1))

    assign = np.full(n, -1)
    prev_inertia = np.inf
    for _ in range(max_iter):
        d2 = np.sum((mat[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        inertia = float(np.sum(d2[np.arange(n), new_assign]))
        if inertia > prev_inertia + 1e-9 * max(1.0, prev_inertia):
            raise NumericError("k-means inertia increased between iterations")
        prev_inertia = inertia
        if history is not None:
            history.append(inertia)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = mat[assign == j]
            if members.shape[0]:
                centers[j] = members.mean(axis=0)
    return assign


def nmi(assignment, truth) -> float:
    """Mutual information over sqrt(H_a * H_b), natural logs.

    Both partitions trivial counts as identical (1.0); one trivial side
    otherwise pins the score to 0.
    """
    a = list(assignment)
    b = list(truth)
    if len(a) != len(b):
        raise InputError(f"partition lengths differ: {len(a)} vs {len(b)}")
    n = len(a)
    if n == 0:
        raise InputError("empty partitions")
    table: dict = {}
    for x, y in zip(a, b):
        table[(x, y)] = table.get((x, y), 0) + 1
    pa: dict = {}
    pb: dict = {}
    for (x, y), c in table.items():
        pa[x] = pa.get(x, 0) + c
        pb[y] = pb.get(y, 0) + c
    ha = -sum((c / n) * math.log(c / n) for c in pa.values())
    hb = -sum((c / n) * math.log(c / n) for c in pb.values())
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    info = sum(
        (c / n) * math.log(n * c / (pa[x] * pb[y])) for (x, y), c in table.items()
    )
    return float(info / math.sqrt(ha * hb))


def distance_ratio(embeddings, labels) -> float:
    """Mean inter-class pair distance over mean intra-class pair distance."""
    mat = _as_matrix(embeddings)
    labels = np.asarray(list(labels), dtype=object)
    if len(set(labels.tolist())) < 2:
        raise InputError("distance ratio needs at least two classes")
    dmat = pairwise_distances(mat)
    iu = np.triu_indices(mat.shape[0], k=1)
    same = labels[iu[0]] == labels[iu[1]]
    if not np.any(same):
        raise InputError("no intra-class pairs")
    intra = float(dmat[iu][same].mean())
    inter = float(dmat[iu][~same].mean())
    if intra == 0.0:
        if inter == 0.0:
            warnings.warn("all points coincide; distance ratio is degenerate", stacklevel=2)
        return math.inf
    return inter / intra


# ---------------------------------------------------------------------------
# leave-one-out kNN

@dataclass(frozen=True)
class KnnReport:
    classes: tuple
    confusion: np.ndarray
    accuracy: float
    macro_f1: float

    def __post_init__(self):
        conf = np.asarray(self.confusion, dtype=np.int64)
        conf.setflags(write=False)
        object.__setattr__(self, "confusion", conf)
        object.__setattr__(self, "classes", tuple(self.classes))


def knn_confusion(embeddings, labels, k: int = 1) -> KnnReport:
    """Classify every sample by its k nearest others and tabulate the result.

    Vote ties go to the class holding the nearest tied neighbor, then to
    the lower neighbor index.
    """
    mat = _as_matrix(embeddings)
    labels = list(labels)
    n = mat.shape[0]
    if n < 2:
        raise InputError("leave-one-out kNN needs at least two samples")
    if not 1 <= k <= n - 1:
        raise ParameterError(f"k must satisfy 1 <= k <= n-1, got k={k} with n={n}")
    classes = _class_order(labels)
    index = {name: i for i, name in enumerate(classes)}
    dmat = pairwise_distances(mat)
    ranks = _neighbor_ranks(dmat)
    conf = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for i in range(n):
        top = ranks[i, :k]
        votes: dict = {}
        for j in top:
            votes[labels[j]] = votes.get(labels[j], 0) + 1
        best = max(votes.values())
        tied = {name for name, v in votes.items() if v == best}
        if len(tied) == 1:
            winner = tied.pop()
        else:
            winner = next(labels[j] for j in top if labels[j] in tied)
        conf[index[labels[i]], index[winner]] += 1
    accuracy = float(np.trace(conf) / n)
    f1s = []
    for c in range(len(classes)):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        f1s.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    return KnnReport(classes, conf, accuracy, float(np.mean(f1s)))


def intra_class_stats(embeddings, labels, cs: CentroidSet) -> dict:
    """Per-class mean and population std of distance to the class centroid."""
    mat = _as_matrix(embeddings)
    labels = list(labels)
    stats = {}
    for name in _class_order(labels):
        mu = cs.centroid(name)
        rows = mat[[i for i, lab in enumerate(labels) if lab == name]]
        dists = np.linalg.norm(rows - mu[None, :], axis=1)
        stats[name] = (float(dists.mean()), float(dists.std()))
    return stats


# ---------------------------------------------------------------------------
# combined report

@dataclass(frozen=True)
class EvalReport:
    recall_at_k: dict
    map_at_r: float
    nmi: float
    rho: float
    classes: tuple
    class_counts: tuple
    confusion: np.ndarray
    macro_f1: float
    intra_class: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in [("map_at_r", self.map_at_r), ("nmi", self.nmi), ("macro_f1", self.macro_f1)]:
            if not 0.0 <= value <= 1.0 + 1e-12:
                raise InputError(f"{name} = {value} outside [0, 1]")
        for k, v in self.recall_at_k.items():
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise InputError(f"recall@{k} = {v} outside [0, 1]")
        if not (self.rho >= 0.0 or math.isinf(self.rho)):
            raise InputError(f"rho = {self.rho} is negative")
        conf = np.asarray(self.confusion, dtype=np.int64)
        if not np.array_equal(conf.sum(axis=1), np.asarray(self.class_counts)):
            raise InputError("confusion row sums must match per-class counts")
        conf.setflags(write=False)
        object.__setattr__(self, "confusion", conf)


def evaluate_embeddings(embeddings, labels, ks=(1, 2, 4, 8), kmeans_seed: int = 0) -> EvalReport:
    """Run the full metric battery over one labeled embedding set."""
    mat = _as_matrix(embeddings)
    labels = list(labels)
    classes = _class_order(labels)
    usable_ks = [k for k in ks if k < mat.shape[0]]
    assign = kmeans(mat, len(classes), seed=kmeans_seed)
    knn = knn_confusion(mat, labels)
    cs = fit_centroids(mat, labels)
    counts = tuple(sum(1 for lab in labels if lab == name) for name in classes)
    return EvalReport(
        recall_at_k=recall_at_k(mat, labels, usable_ks),
        map_at_r=map_at_r(mat, labels),
        nmi=nmi(assign.tolist(), labels),
        rho=distance_ratio(mat, labels),
        classes=classes,
        class_counts=counts,
        confusion=knn.confusion,
        macro_f1=knn.macro_f1,
        intra_class=intra_class_stats(mat, labels, cs),
    )


# ---------------------------------------------------------------------------
# embeddings CSV

def write_embeddings_csv(path, ids, labels, embeddings) -> None:
    """Write `id,label,e0,...` rows with %.8g floats."""
    mat = _as_matrix(embeddings)
    ids = list(ids)
    labels = list(labels)
    if not len(ids) == len(labels) == mat.shape[0]:
        raise InputError("ids, labels and embeddings must have equal length")
    dim = mat.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"e{i}" for i in range(dim)])
        for i in range(mat.shape[0]):
            writer.writerow([ids[i], labels[i]] + ["%.8g" % v for v in mat[i]])


def read_embeddings_csv(path):
    """Read the CSV written by write_embeddings_csv.

    Returns (ids, labels, matrix); ids and labels come back as strings.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path} is empty")
    header = rows[0]
    if header[:2] != ["id", "label"] or any(
        h != f"e{i}" for i, h in enumerate(header[2:])
    ):
        raise ParseError(f"unexpected embeddings CSV header: {header[:4]}...")
    dim = len(header) - 2
    ids, labels, vecs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 2:
            raise ParseError(f"row has {len(row)} fields, expected {dim + 2}", line=lineno)
        ids.append(row[0])
        labels.append(row[1])
        try:
            vecs.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise ParseError(f"bad float in embeddings row: {exc}", line=lineno) from None
    return ids, labels, np.asarray(vecs, dtype=np.float64)
