import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn import metrics as skm

from facl.errors import UndefinedMetricError
from facl.metrics import cohen_kappa, compute_metrics, confusion_matrix, confusion_metrics, macro_auc, roc_auc
from facl.tensor import derive_rng


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def oe_kappa(preds, labels, C, weighting):
    O = [[0.0] * C for _ in range(C)]
    for p, y in zip(preds, labels):
        O[y][p] += 1
    n = len(preds)
    rows = [sum(O[i]) for i in range(C)]
    cols = [sum(O[i][j] for i in range(C)) for j in range(C)]
    num = den = 0.0
    for i in range(C):
        for j in range(C):
            w = float(i != j) if weighting == "none" else ((i - j) / (C - 1)) ** 2
            num += w * O[i][j]
            den += w * rows[i] * cols[j] / n
    return 1 - num / den


def _instance(rng, n, C=2, ties=False):
    labels = rng.integers(C, size=n)
    labels[:C] = np.arange(C)
    scores = rng.integers(0, 5, size=n) / 4.0 if ties else rng.normal(size=n)
    return scores, labels


def test_auc_worked_example():
    assert pair_count_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_trivial_cases():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [0, 2])


@pytest.mark.parametrize("ties", [False, True])
def test_auc_matches_pair_counting(ties):
    rng = derive_rng(40, int(ties))
    for _ in range(100):
        s, y = _instance(rng, int(rng.integers(2, 51)), ties=ties)
        assert abs(roc_auc(s, y) - pair_count_auc(s, y)) < 1e-12
        assert abs(roc_auc(s, y) - skm.roc_auc_score(y, s)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 60))
def test_auc_invariances(seed, n):
    rng = derive_rng(seed)
    s, y = _instance(rng, n)
    base = roc_auc(s, y)
    assert roc_auc(np.exp(3 * s) + 1, y) == pytest.approx(base, abs=1e-12)
    assert base + roc_auc(-s, y) == pytest.approx(1.0, abs=1e-12)
    perm = rng.permutation(n)
    assert roc_auc(s[perm], y[perm]) == pytest.approx(base, abs=1e-12)


def test_confusion_examples():
    labels = [0, 0, 1, 1, 2, 2]
    preds = [0, 0, 0, 1, 2, 2]
    cm = confusion_matrix(preds, labels, 3)
    np.testing.assert_array_equal(cm, [[2, 0, 0], [1, 1, 0], [0, 0, 2]])
    acc, recall, f1 = confusion_metrics(preds, labels, 3)
    assert acc == pytest.approx(5 / 6)
    assert recall == pytest.approx((1 + 0.5 + 1) / 3)
    # precisions (2/3, 1, 1) with recalls (1, 0.5, 1)
    assert f1 == pytest.approx((0.8 + 2 / 3 + 1) / 3)
    assert confusion_metrics([1, 0, 2], [1, 0, 2], 3) == (1.0, 1.0, 1.0)
    acc, recall, f1 = confusion_metrics([0, 0, 0, 0], [0, 1, 0, 1], 2)
    assert (acc, recall, f1) == (0.5, 0.0, 0.0)


def test_confusion_metrics_match_sklearn():
    rng = derive_rng(41)
    for C in (2, 3, 6):
        for _ in range(20):
            y, p = rng.integers(C, size=40), rng.integers(C, size=40)
            acc, recall, f1 = confusion_metrics(p, y, C)
            avg = "binary" if C == 2 else "macro"
            assert acc == pytest.approx(skm.accuracy_score(y, p))
            kw = dict(average=avg, labels=list(range(C)), zero_division=0)
            assert recall == pytest.approx(skm.recall_score(y, p, **kw))
            assert f1 == pytest.approx(skm.f1_score(y, p, **kw))


def test_kappa_worked_example():
    labels = [0, 0, 0, 1, 1, 1]
    preds = [0, 0, 1, 0, 1, 1]
    assert oe_kappa(preds, labels, 2, "none") == pytest.approx(1 / 3, abs=1e-15)
    assert cohen_kappa(preds, labels, 2) == pytest.approx(1 / 3, abs=1e-15)
    assert cohen_kappa(preds, labels, 6) == pytest.approx(1 / 3, abs=1e-15)


@pytest.mark.parametrize("weighting", ["none", "quadratic"])
@pytest.mark.parametrize("C", [2, 3, 6])
def test_kappa_matches_oe_oracle(weighting, C):
    rng = derive_rng(42, C)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        y = rng.integers(C, size=n)
        # mostly right, some noise, so kappa spans a range of values
        p = np.where(rng.random(n) < 0.6, y, rng.integers(C, size=n))
        y[0], p[0] = 0, 1 % C
        got = cohen_kappa(p, y, C, weighting)
        assert abs(got - oe_kappa(p, y, C, weighting)) < 1e-12
        sk = skm.cohen_kappa_score(y, p, labels=list(range(C)), weights=None if weighting == "none" else "quadratic")
        assert abs(got - sk) < 1e-12
        assert got == pytest.approx(cohen_kappa(y, p, C, weighting), abs=1e-12)


def test_kappa_edge_cases():
    assert cohen_kappa([2, 2, 2], [2, 2, 2], 6) == 1.0
    assert cohen_kappa([0, 1, 5], [0, 1, 5], 6, "quadratic") == 1.0
    # one category each side but different ones: chance disagreement is total
    assert cohen_kappa([1, 1], [2, 2], 6) == 0.0
    with pytest.raises(ValueError):
        cohen_kappa([], [], 2)
    with pytest.raises(ValueError):
        cohen_kappa([0], [0], 2, "linear")
    rng = derive_rng(43)
    y, p = rng.integers(6, size=20000), rng.integers(6, size=20000)
    assert abs(cohen_kappa(p, y, 6, "quadratic")) < 0.03


def test_quadratic_kappa_penalizes_distance():
    labels = [0, 1, 2, 3, 4, 5] * 3
    near = list(labels)
    far = list(labels)
    near[0], far[0] = 1, 5
    assert cohen_kappa(far, labels, 6, "quadratic") < cohen_kappa(near, labels, 6, "quadratic")


def test_macro_auc():
    labels = np.array([0, 1, 2, 0, 1, 2])
    assert macro_auc(np.eye(3)[labels], labels, 3) == 1.0
    assert macro_auc(np.full((6, 3), 1 / 3), labels, 3) == 0.5
    with pytest.raises(UndefinedMetricError, match=r"\[2\]"):
        macro_auc(np.eye(3)[[0, 1]], [0, 1], 3)
    rng = derive_rng(44)
    for _ in range(20):
        y = rng.integers(3, size=30)
        y[:3] = [0, 1, 2]
        P = rng.dirichlet(np.ones(3), size=30)
        expected = np.mean([pair_count_auc(P[:, c], (y == c).astype(int)) for c in range(3)])
        assert abs(macro_auc(P, y, 3) - expected) < 1e-12


def test_compute_metrics():
    probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    m = compute_metrics(probs, [0, 1, 1, 1], 2)
    assert m.auc == 1.0 and m.acc == 0.75 and m.recall == pytest.approx(2 / 3)
    assert m.kappa == pytest.approx(oe_kappa([0, 1, 0, 1], [0, 1, 1, 1], 2, "none"))
    m = compute_metrics(probs, [1, 1, 1, 1], 2)
    assert np.isnan(m.auc)
    for v in (m.acc, m.f1, m.recall):
        assert 0 <= v <= 1
