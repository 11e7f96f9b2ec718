import math

import numpy as np
import pytest

import oracles
from pollengine import metrics
from pollengine.errors import (
    DegenerateInputError,
    DimensionError,
    InputError,
    ParameterError,
    ParseError,
)
from pollengine.metrics import (
    CentroidSet,
    EvalReport,
    Prediction,
    class_confidences,
    classify,
    distance_ratio,
    evaluate_embeddings,
    fit_centroids,
    intra_class_stats,
    kmeans,
    knn_confusion,
    map_at_r,
    nmi,
    pairwise_distances,
    read_embeddings_csv,
    recall_at_k,
    write_embeddings_csv,
)


def unit_rows(mat):
    mat = np.asarray(mat, dtype=np.float64)
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def labeled_cloud(n_classes, per_class, dim, noise, seed):
    """Orthonormal class directions with Gaussian scatter, row-normalized."""
    rng = np.random.default_rng(seed)
    dirs, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    dirs = dirs.T[:n_classes]
    rows, labels = [], []
    for c in range(n_classes):
        for _ in range(per_class):
            rows.append(dirs[c] + noise * rng.standard_normal(dim))
            labels.append(f"c{c}")
    return unit_rows(np.stack(rows)), labels


GREAT_CIRCLE = np.array(
    [[math.cos(t), math.sin(t)] for t in (0.0, math.pi / 2, math.pi, 3 * math.pi / 2)]
)
ALTERNATING = ["A", "B", "A", "B"]


# --- centroids --------------------------------------------------------------

def test_single_sample_centroid_is_the_sample():
    e = unit_rows(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]]))
    cs = fit_centroids(e, ["a", "b"])
    assert np.allclose(cs.centroid("a"), e[0])
    assert np.allclose(cs.centroid("b"), e[1])
    assert cs.counts == (1, 1)


def test_antipodal_class_is_degenerate():
    e = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(DegenerateInputError):
        fit_centroids(e, ["a", "a"])


def test_centroid_concentration():
    rng = np.random.default_rng(0)
    true = unit_rows(rng.standard_normal((1, 16)))[0]
    pts = unit_rows(true + 0.3 * rng.standard_normal((100, 16)))
    cs = fit_centroids(pts, ["a"] * 100)
    worst = np.min(pts @ true)  # smallest cosine = largest angle
    assert float(cs.centroid("a") @ true) > worst


def test_declared_class_without_samples():
    e = unit_rows(np.ones((2, 3)))
    with pytest.raises(InputError):
        fit_centroids(e, ["a", "a"], classes=("a", "b"))


def test_centroid_set_validation():
    with pytest.raises(InputError):
        CentroidSet(("a", "a"), unit_rows(np.ones((2, 3))), (1, 1))
    with pytest.raises(InputError):
        CentroidSet(("a",), np.array([[2.0, 0.0]]), (1,))
    with pytest.raises(InputError):
        CentroidSet(("a",), np.array([[1.0, 0.0]]), (0,))


# --- classification ---------------------------------------------------------

def three_centroids():
    return CentroidSet(("a", "b", "c"), np.eye(3), (5, 5, 5))


def test_exact_centroid_match():
    cs = three_centroids()
    pred = classify(np.array([0.0, 1.0, 0.0]), cs)
    assert pred.class_name == "b"
    assert pred.distance == 0.0
    conf = class_confidences(np.array([0.0, 1.0, 0.0]), cs)
    assert pred.confidence == max(conf.values())
    assert sum(conf.values()) == pytest.approx(1.0)


def test_distance_at_cos_0999():
    # two unit vectors with cosine 0.999 sit sqrt(2 * 0.001) apart
    c = math.sqrt(2.0 * 0.001)
    cs = CentroidSet(("a",), np.array([[1.0, 0.0]]), (1,))
    v = np.array([0.999, math.sqrt(1.0 - 0.999**2)])
    pred = classify(v, cs)
    assert pred.distance == pytest.approx(c, abs=1e-12)
    assert pred.distance == pytest.approx(0.0447, abs=1e-4)


def test_equidistant_tie_goes_to_earlier_class():
    cs = CentroidSet(("a", "b"), np.array([[1.0, 0.0], [0.0, 1.0]]), (1, 1))
    v = unit_rows(np.array([[1.0, 1.0]]))[0]
    pred = classify(v, cs)
    assert pred.class_name == "a"
    conf = class_confidences(v, cs)
    assert conf["a"] == pytest.approx(conf["b"])


def test_classify_dimension_gate():
    with pytest.raises(DimensionError):
        classify(np.ones(4), three_centroids())
    with pytest.raises(ParameterError):
        class_confidences(np.array([1.0, 0.0, 0.0]), three_centroids(), tau=0.0)


def test_prediction_validation():
    with pytest.raises(InputError):
        Prediction("a", 3.0, 0.5)
    with pytest.raises(InputError):
        Prediction("a", 0.5, 1.5)


# --- recall@K ---------------------------------------------------------------

def test_recall_on_duplicated_points():
    pts = unit_rows(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]))
    out = recall_at_k(pts, ["a", "a", "b", "b"], [1, 2])
    assert out == {1: 1.0, 2: 1.0}


def test_recall_alternating_great_circle():
    assert recall_at_k(GREAT_CIRCLE, ALTERNATING, [1])[1] == 0.0


def test_recall_single_class():
    pts = unit_rows(np.random.default_rng(0).standard_normal((5, 4)))
    out = recall_at_k(pts, ["x"] * 5, [1, 2, 3, 4])
    assert all(v == 1.0 for v in out.values())


def test_recall_k_bounds():
    pts = unit_rows(np.random.default_rng(0).standard_normal((4, 3)))
    with pytest.raises(ParameterError):
        recall_at_k(pts, ["a"] * 4, [4])
    with pytest.raises(ParameterError):
        recall_at_k(pts, ["a"] * 4, [0])


def test_recall_non_decreasing_in_k():
    pts, labels = labeled_cloud(3, 6, 8, 0.6, seed=5)
    out = recall_at_k(pts, labels, range(1, 17))
    vals = [out[k] for k in range(1, 17)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_recall_matches_brute_force():
    pts, labels = labeled_cloud(3, 7, 6, 0.8, seed=2)
    out = recall_at_k(pts, labels, [1, 3, 5])
    for k in (1, 3, 5):
        assert out[k] == oracles.recall_brute(pts.tolist(), labels, k)


# --- mAP@R ------------------------------------------------------------------

def test_map_at_r_duplicated_points():
    pts = unit_rows(np.array([[1.0, 0.0]] * 3 + [[0.0, 1.0]] * 3))
    assert map_at_r(pts, ["a"] * 3 + ["b"] * 3) == 1.0


def test_map_at_r_all_wrong_in_first_ranks():
    # the lone-but-paired class sits far away; each "a" query's top ranks
    # are its own class, but the adversarial pair sees only wrong answers
    pts = np.array([[1.0, 0.0], [0.999, 0.0447], [-1.0, 0.0], [0.99, 0.14]])
    pts = unit_rows(pts)
    labels = ["a", "a", "b", "b"]
    # query 2 ("b" at -x): nearest ranks are the two "a"s before its partner
    value = map_at_r(pts, labels)
    brute = oracles.map_at_r_brute(pts.tolist(), labels)
    assert value == pytest.approx(brute, abs=1e-12)
    assert value < 1.0


def test_map_at_r_matches_brute_force():
    pts, labels = labeled_cloud(2, 2, 4, 1.0, seed=11)
    assert map_at_r(pts, labels) == pytest.approx(
        oracles.map_at_r_brute(pts.tolist(), labels), abs=1e-12
    )
    pts2, labels2 = labeled_cloud(4, 5, 8, 0.7, seed=12)
    assert map_at_r(pts2, labels2) == pytest.approx(
        oracles.map_at_r_brute(pts2.tolist(), labels2), abs=1e-12
    )


def test_map_at_r_skips_singletons():
    pts = unit_rows(np.array([[1.0, 0.0], [0.99, 0.14], [0.0, 1.0]]))
    value, skipped = map_at_r(pts, ["a", "a", "lone"], return_skipped=True)
    assert skipped == 1
    assert value == 1.0


def test_map_at_r_all_singletons():
    pts = unit_rows(np.eye(3))
    with pytest.raises(InputError):
        map_at_r(pts, ["a", "b", "c"])


# --- k-means + NMI ----------------------------------------------------------

def test_kmeans_k_equals_n():
    pts = unit_rows(np.random.default_rng(1).standard_normal((6, 4)))
    history = []
    assign = kmeans(pts, 6, seed=0, history=history)
    assert sorted(assign.tolist()) == list(range(6))
    assert history[-1] == 0.0


def test_kmeans_k_one_matches_global_mean():
    pts = unit_rows(np.random.default_rng(2).standard_normal((10, 5)))
    history = []
    assign = kmeans(pts, 1, seed=0, history=history)
    assert np.all(assign == 0)
    expected = float(np.sum((pts - pts.mean(axis=0)) ** 2))
    assert history[-1] == pytest.approx(expected, abs=1e-9)


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(3)
    a = np.array([0.0, 0.0]) + 0.05 * rng.standard_normal((20, 2))
    b = np.array([1.0, 0.0]) + 0.05 * rng.standard_normal((20, 2))
    pts = np.vstack([a, b])
    assign = kmeans(pts, 2, seed=7)
    first, second = set(assign[:20].tolist()), set(assign[20:].tolist())
    assert len(first) == 1 and len(second) == 1 and first != second


def test_kmeans_deterministic_and_monotone():
    pts, _ = labeled_cloud(4, 10, 6, 0.5, seed=8)
    h1, h2 = [], []
    a1 = kmeans(pts, 4, seed=5, history=h1)
    a2 = kmeans(pts, 4, seed=5, history=h2)
    assert np.array_equal(a1, a2)
    assert h1 == h2
    assert all(b <= a + 1e-9 for a, b in zip(h1, h1[1:]))


def test_kmeans_k_bounds():
    pts = unit_rows(np.ones((3, 2)) + np.eye(3, 2))
    with pytest.raises(ParameterError):
        kmeans(pts, 4)
    with pytest.raises(ParameterError):
        kmeans(pts, 0)


def test_nmi_identical_partitions():
    assert nmi(["x", "y", "x", "z"], ["x", "y", "x", "z"]) == pytest.approx(1.0)
    # identical as partitions under renaming
    assert nmi([0, 1, 0, 2], ["x", "y", "x", "z"]) == pytest.approx(1.0)


def test_nmi_single_cluster_is_zero():
    assert nmi([0, 0, 0, 0], ["a", "a", "b", "b"]) == 0.0
    assert nmi(["a", "a", "b", "b"], [0, 0, 0, 0]) == 0.0
    assert nmi([0, 0], [0, 0]) == 1.0  # both trivial and identical


def test_nmi_four_point_case_matches_contingency_formula():
    value = nmi([0, 1, 0, 1], ["A", "A", "B", "B"])
    assert value == pytest.approx(oracles.nmi_brute([0, 1, 0, 1], ["A", "A", "B", "B"]), abs=1e-12)


def test_nmi_symmetric():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 3, 30).tolist()
    b = rng.integers(0, 4, 30).tolist()
    assert nmi(a, b) == pytest.approx(nmi(b, a), abs=1e-12)
    assert nmi(a, b) == pytest.approx(oracles.nmi_brute(a, b), abs=1e-12)


def test_nmi_length_mismatch():
    with pytest.raises(InputError):
        nmi([0, 1], [0, 1, 2])


# --- distance ratio ---------------------------------------------------------

def test_rho_infinite_for_collapsed_classes():
    pts = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    assert distance_ratio(pts, ["a", "a", "b", "b"]) == math.inf


def test_rho_exact_construction():
    # intra pairs 0.2 apart; orthogonal offsets make all four inter
    # distances exactly 1
    h = math.sqrt(1.0 - 0.02)
    pts = np.array(
        [
            [0.1, 0.0, 0.0],
            [-0.1, 0.0, 0.0],
            [0.0, 0.1, h],
            [0.0, -0.1, h],
        ]
    )
    assert distance_ratio(pts, ["a", "a", "b", "b"]) == pytest.approx(5.0, abs=1e-12)


def test_rho_fully_degenerate_warns():
    pts = np.ones((4, 3))
    with pytest.warns(UserWarning):
        assert distance_ratio(pts, ["a", "a", "b", "b"]) == math.inf


def test_rho_needs_two_classes_and_intra_pairs():
    pts = np.random.default_rng(0).standard_normal((4, 3))
    with pytest.raises(InputError):
        distance_ratio(pts, ["a"] * 4)
    with pytest.raises(InputError):
        distance_ratio(pts[:2], ["a", "b"])


def test_rho_matches_brute_force():
    pts, labels = labeled_cloud(3, 5, 6, 0.5, seed=13)
    assert distance_ratio(pts, labels) == pytest.approx(
        oracles.rho_brute(pts.tolist(), labels), abs=1e-12
    )


# --- leave-one-out kNN ------------------------------------------------------

def test_knn_two_blobs_perfect():
    pts, labels = labeled_cloud(2, 10, 8, 0.1, seed=4)
    report = knn_confusion(pts, labels)
    assert report.accuracy == 1.0
    assert report.macro_f1 == 1.0
    assert np.array_equal(report.confusion, np.diag([10, 10]))


def test_knn_alternating_circle_fails_completely():
    report = knn_confusion(GREAT_CIRCLE, ALTERNATING)
    assert report.accuracy == 0.0
    assert np.trace(report.confusion) == 0


def test_knn_matches_brute_force():
    pts, labels = labeled_cloud(3, 8, 5, 0.9, seed=6)
    report = knn_confusion(pts, labels)
    predicted = oracles.knn1_brute(pts.tolist(), labels)
    classes = report.classes
    expected = np.zeros((3, 3), dtype=int)
    for true, pred in zip(labels, predicted):
        expected[classes.index(true), classes.index(pred)] += 1
    assert np.array_equal(report.confusion, expected)


def test_knn_well_separated_space_is_accurate():
    pts, labels = labeled_cloud(4, 12, 16, 0.06, seed=9)
    assert distance_ratio(pts, labels) >= 3.0
    assert knn_confusion(pts, labels).accuracy >= 0.95


def test_knn_k_validation():
    pts = unit_rows(np.eye(3))
    with pytest.raises(ParameterError):
        knn_confusion(pts, ["a", "b", "c"], k=3)


# --- per-class spread -------------------------------------------------------

def test_intra_stats_singleton_is_zero():
    pts = unit_rows(np.array([[1.0, 0.0], [0.0, 1.0]]))
    cs = fit_centroids(pts, ["a", "b"])
    stats = intra_class_stats(pts, ["a", "b"], cs)
    assert stats["a"] == (0.0, 0.0)


def test_intra_stats_symmetric_pair_has_zero_std():
    pts = unit_rows(np.array([[1.0, 0.1], [1.0, -0.1]]))
    cs = fit_centroids(pts, ["a", "a"])
    mean, std = intra_class_stats(pts, ["a", "a"], cs)["a"]
    assert std == pytest.approx(0.0, abs=1e-12)
    assert mean > 0.0


def test_intra_stats_unknown_class():
    pts = unit_rows(np.array([[1.0, 0.0], [0.0, 1.0]]))
    cs = CentroidSet(("a",), np.array([[1.0, 0.0]]), (1,))
    with pytest.raises(InputError):
        intra_class_stats(pts, ["a", "b"], cs)


# --- combined report and CSV ------------------------------------------------

def test_evaluate_embeddings_coherent_report():
    pts, labels = labeled_cloud(3, 8, 12, 0.2, seed=10)
    report = evaluate_embeddings(pts, labels, ks=(1, 2, 4))
    assert set(report.recall_at_k) == {1, 2, 4}
    assert report.rho > 1.0
    assert report.classes == ("c0", "c1", "c2")
    assert report.class_counts == (8, 8, 8)
    assert report.confusion.sum() == 24
    assert 0.0 <= report.nmi <= 1.0
    assert set(report.intra_class) == {"c0", "c1", "c2"}


def test_eval_report_row_sum_gate():
    with pytest.raises(InputError):
        EvalReport(
            recall_at_k={1: 1.0},
            map_at_r=1.0,
            nmi=1.0,
            rho=2.0,
            classes=("a", "b"),
            class_counts=(2, 2),
            confusion=np.array([[1, 0], [0, 2]]),
            macro_f1=1.0,
        )


def test_embeddings_csv_roundtrip(tmp_path):
    pts, labels = labeled_cloud(2, 3, 6, 0.4, seed=14)
    ids = [f"img.{i}" for i in range(6)]
    path = tmp_path / "emb.csv"
    write_embeddings_csv(path, ids, labels, pts)
    header = path.read_text().splitlines()[0]
    assert header == "id,label," + ",".join(f"e{i}" for i in range(6))
    rids, rlabels, mat = read_embeddings_csv(path)
    assert rids == ids
    assert rlabels == labels
    assert np.max(np.abs(mat - pts)) < 1e-7


def test_embeddings_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,label,x0,x1\na,b,0.1,0.2\n")
    with pytest.raises(ParseError):
        read_embeddings_csv(p)


def test_embeddings_csv_rejects_short_row(tmp_path):
    p = tmp_path / "short.csv"
    p.write_text("id,label,e0,e1\na,b,0.1\n")
    with pytest.raises(ParseError):
        read_embeddings_csv(p)


def test_embeddings_csv_rejects_bad_float(tmp_path):
    p = tmp_path / "badf.csv"
    p.write_text("id,label,e0,e1\na,b,0.1,zap\n")
    with pytest.raises(ParseError) as exc:
        read_embeddings_csv(p)
    assert exc.value.line == 2


def test_pairwise_distance_symmetry():
    pts, _ = labeled_cloud(2, 5, 4, 0.5, seed=15)
    d = pairwise_distances(pts)
    assert np.allclose(d, d.T)
    assert np.all(np.diag(d) == 0.0)
