# furnistyle/tests/test_evaluation.py
import numpy as np
import pytest

from furnistyle.dataset import PairSample
from furnistyle.errors import ContractError, MetricError
from furnistyle.evaluation import (
    BANDWIDTH_FLOOR,
    EvaluationReport,
    DistanceSummary,
    active_negative_fraction,
    build_report,
    compatibility_score,
    distance_kde,
    nearest_centroid_accuracy,
    pair_distances,
    per_style_auc,
    recall_at_k,
    roc_auc,
    silverman_bandwidth,
    write_report,
)


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


# ─── Scores ─────────────────────────────────────────────────────────
def test_compatibility_score_is_decreasing():
    assert compatibility_score(0.0) == 1.0
    assert compatibility_score(1.0) == 0.5
    s = compatibility_score([0.0, 0.5, 2.0, 10.0])
    assert np.all(np.diff(s) < 0)
    with pytest.raises(ContractError):
        compatibility_score(-0.1)


def test_pair_distances():
    vecs = {"a": np.zeros(2), "b": np.array([3.0, 4.0]), "c": np.array([0.0, 1.0])}
    d = pair_distances([PairSample("a", "b", 1), PairSample("a", "c", 0)], vecs)
    np.testing.assert_allclose(d, [5.0, 1.0])
    assert pair_distances([], vecs).size == 0


# ─── AUC ────────────────────────────────────────────────────────────
def test_roc_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, 12, size=n).astype(float)
        assert roc_auc(scores, labels) == _brute_auc(scores, labels)


def test_roc_auc_properties(rng):
    scores = rng.standard_normal(300)
    labels = rng.integers(0, 2, size=300)
    base = roc_auc(scores, labels)
    assert roc_auc(np.exp(scores), labels) == pytest.approx(base)
    assert roc_auc(3.0 * scores + 1.0, labels) == pytest.approx(base)
    assert roc_auc(-scores, labels) == pytest.approx(1.0 - base)
    assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5


def test_roc_auc_single_class_and_bad_labels():
    with pytest.raises(MetricError, match="both classes"):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2], [0, 2])
    with pytest.raises(MetricError):
        roc_auc([0.1, 0.2, 0.3], [0, 1])


def test_per_style_auc_matches_filter_oracle(rng):
    style_of = {f"x{k}": k % 3 for k in range(12)}
    ids = list(style_of)
    pairs = []
    for _ in range(80):
        a, b = rng.choice(len(ids), size=2, replace=False)
        same = style_of[ids[a]] == style_of[ids[b]]
        pairs.append(PairSample.canonical(ids[a], ids[b], 1 if same else 0))
    scores = rng.random(len(pairs))
    result = per_style_auc(pairs, scores, style_of)
    for st, value in result.items():
        idx = [
            k
            for k, p in enumerate(pairs)
            if style_of[p.i] == st or (p.Y == 0 and style_of[p.j] == st)
        ]
        assert value == roc_auc(scores[idx], [pairs[k].Y for k in idx])


def test_per_style_auc_omits_single_class_styles(caplog):
    style_of = {"a": 0, "b": 0, "c": 1, "d": 2}
    pairs = [PairSample("a", "b", 1), PairSample("a", "c", 0), PairSample("c", "d", 0)]
    result = per_style_auc(pairs, [0.9, 0.1, 0.2], style_of)
    assert result == {0: 1.0}
    assert "omitted" in caplog.text


# ─── Recall and diagnostics ─────────────────────────────────────────
def test_recall_at_k():
    ranked = [["a", "b", "c"], ["d", "e", "f"], ["g", "h", "i"]]
    relevant = [{"a"}, {"f"}, {"z"}]
    assert recall_at_k(ranked, relevant, 1) == pytest.approx(1 / 3)
    assert recall_at_k(ranked, relevant, 3) == pytest.approx(2 / 3)
    with pytest.raises(ContractError):
        recall_at_k(ranked, relevant, 0)
    with pytest.raises(MetricError):
        recall_at_k([], [], 1)
    with pytest.raises(MetricError):
        recall_at_k(ranked, relevant[:2], 1)


def test_active_negative_fraction():
    d = [0.5, 1.0, 2.0, 3.0, 0.1]
    y = [0, 0, 0, 0, 1]
    assert active_negative_fraction(d, y, 1.5) == 0.5
    assert active_negative_fraction(d, y, 100.0) == 1.0
    with pytest.raises(MetricError):
        active_negative_fraction([0.1], [1], 1.0)


def test_nearest_centroid_accuracy(rng):
    centers = np.array([[0.0, 0.0], [10.0, 10.0]])
    y = np.repeat([0, 1], 20)
    X = centers[y] + 0.1 * rng.standard_normal((40, 2))
    assert nearest_centroid_accuracy(X, y, X, y) == 1.0
    assert nearest_centroid_accuracy(X, y, X, 1 - y) == 0.0


# ─── Distance distributions ─────────────────────────────────────────
def test_silverman_bandwidth_floor():
    assert silverman_bandwidth(np.ones(50)) == BANDWIDTH_FLOOR
    assert silverman_bandwidth([3.0]) == BANDWIDTH_FLOOR
    assert silverman_bandwidth(np.linspace(0, 1, 100)) > 0.01


def test_kde_overlap_separated_vs_identical(rng):
    near = rng.normal(0.5, 0.1, 300)
    far = rng.normal(5.0, 0.1, 300)
    separated = distance_kde(near, far)
    assert separated.overlap() < 0.01
    same = distance_kde(near, near)
    assert same.overlap() == pytest.approx(1.0, abs=1e-3)
    area = np.trapezoid(separated.pos_density, separated.grid)
    assert area == pytest.approx(1.0, abs=1e-3)


def test_kde_curves_integrate_to_one_for_a_tight_cluster(rng):
    tight = 0.01 + 1e-4 * rng.standard_normal(200)
    wide = rng.uniform(0.0, 50.0, 300)
    for pos, neg in ((tight, wide), (np.full(40, 0.5), np.linspace(0.0, 10.0, 50))):
        kde = distance_kde(pos, neg)
        assert np.trapezoid(kde.pos_density, kde.grid) == pytest.approx(1.0, rel=0.01)
        assert np.trapezoid(kde.neg_density, kde.grid) == pytest.approx(1.0, rel=0.01)
        assert 0.0 <= kde.overlap() <= 1.0
    assert kde.grid[0] < 0.5 - 2 * (kde.grid[1] - kde.grid[0])


def test_kde_errors():
    with pytest.raises(MetricError):
        distance_kde([1.0], [1.0, 2.0])
    with pytest.raises(ContractError):
        distance_kde([1.0, 2.0], [1.0, 2.0], bandwidth=-1.0)
    with pytest.raises(ContractError):
        distance_kde([1.0, 2.0], [1.0, 2.0], grid_size=4)


# ─── Report ─────────────────────────────────────────────────────────
def _report_inputs():
    style_of = {"a": 0, "b": 0, "c": 1, "d": 1, "e": 2}
    pairs = [
        PairSample("a", "b", 1),
        PairSample("c", "d", 1),
        PairSample("a", "c", 0),
        PairSample("b", "e", 0),
        PairSample("d", "e", 0),
    ]
    return pairs, [0.2, 0.4, 1.5, 2.0, 0.3], style_of


def test_build_and_write_report(tmp_path):
    pairs, d, style_of = _report_inputs()
    report = build_report(pairs, d, style_of, recall_at={1: 0.5}, extras={"kde_overlap": 0.25})
    assert report.pos.n == 2 and report.neg.n == 3
    assert report.auc_overall == pytest.approx(5 / 6)
    written = write_report(report, tmp_path / "out")
    names = sorted(p.name for p in written)
    assert names == ["kde_neg.tsv", "kde_pos.tsv", "report.kv", "report.txt"]
    kv = dict(line.split("=", 1) for line in (tmp_path / "out" / "report.kv").read_text().splitlines())
    assert kv["auc_overall"] == f"{5 / 6:.6f}"
    assert kv["recall_at_01"] == "0.500000"
    assert kv["kde_overlap"] == "0.250000"
    assert "Recall@1" in (tmp_path / "out" / "report.txt").read_text()
    curve = (tmp_path / "out" / "kde_pos.tsv").read_text().splitlines()
    assert curve[0] == "x\tdensity"
    assert len(curve) == 513


def test_report_rejects_out_of_range_values():
    with pytest.raises(MetricError):
        EvaluationReport(1.2, {}, {}, DistanceSummary(0, 0.0, 0.0), DistanceSummary(0, 0.0, 0.0))
