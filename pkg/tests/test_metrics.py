import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmemetic.metrics import (
    MetricsError,
    accuracy,
    average_precision_ovr,
    classification_report,
    cohens_kappa,
    confusion_matrix,
    evaluate_predictions,
    roc_auc_ovr,
    rows_to_csv,
)


# -- oracles -------------------------------------------------------------------

def report_oracle(preds, labels, C):
    """Per-class P/R/F1 and accuracy by direct counting over samples."""
    out = []
    for c in range(C):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out.append((prec, rec, f1))
    acc = sum(1 for p, y in zip(preds, labels) if p == y) / len(labels)
    return out, acc


def kappa_oracle(preds, labels, C):
    n = len(labels)
    po = sum(p == y for p, y in zip(preds, labels)) / n
    pe = sum((sum(y == c for y in labels) / n) * (sum(p == c for p in preds) / n) for c in range(C))
    return 0.0 if pe == 1 else (po - pe) / (1 - pe)


def auc_oracle(s, pos):
    """O(n^2) pair count: P(positive outscores negative), ties = 1/2."""
    P = [a for a, p in zip(s, pos) if p]
    N = [a for a, p in zip(s, pos) if not p]
    wins = 0.0
    for a in P:
        for b in N:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(P) * len(N))


def ap_oracle(s, pos):
    """Sum over every cutoff of (recall gain) * precision, recounted from scratch."""
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    n_pos = sum(pos)
    terms = []
    prev_recall = 0.0
    for k in range(1, len(order) + 1):
        tp = sum(1 for i in order[:k] if pos[i])
        recall = tp / n_pos
        precision = tp / k
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
    return math.fsum(terms)


# -- confusion matrix ------------------------------------------------------------

def test_confusion_matrix_examples():
    np.testing.assert_array_equal(confusion_matrix([0, 1], [0, 1], 2), [[1, 0], [0, 1]])
    cm = confusion_matrix([1, 1], [0, 1], 2)
    assert cm[0][1] == 1 and cm[1][1] == 1 and cm.sum() == 2
    labels = [0, 0, 2, 1, 2, 2]
    cm = confusion_matrix([1, 0, 2, 2, 0, 2], labels, 3)
    np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(labels, minlength=3))
    with pytest.raises(MetricsError):
        confusion_matrix([0], [0, 1], 2)


def test_binary_worked_example():
    cm = np.array([[900, 10], [40, 50]])       # class 1 positive: TP 50, FP 10, FN 40, TN 900
    rep = classification_report(cm)
    assert round(rep.precision[1], 4) == 0.8333
    assert round(rep.recall[1], 4) == 0.5556
    assert round(rep.f1[1], 4) == 0.6667
    assert rep.accuracy == 0.95


def test_perfect_and_macro():
    rep = classification_report(np.diag([3, 4, 5]))
    assert rep.accuracy == rep.macro_f1 == rep.macro_precision == rep.macro_recall == rep.kappa == 1.0
    rep = classification_report(np.array([[5, 2, 0], [1, 3, 1], [0, 0, 4]]))
    assert rep.macro_f1 == pytest.approx(rep.f1.mean(), abs=0)


def test_zero_denominator_is_zero():
    rep = classification_report(np.array([[2, 0], [3, 0]]))
    assert rep.precision[1] == 0.0 and rep.recall[1] == 0.0 and rep.f1[1] == 0.0


def test_empty_matrix_errors():
    with pytest.raises(MetricsError):
        classification_report(np.zeros((2, 2), int))
    with pytest.raises(MetricsError):
        cohens_kappa(np.zeros((2, 2), int))


def test_weighted_average_flag():
    cm = np.array([[8, 2], [1, 1]])
    rep = classification_report(cm, average="weighted")
    expect = (rep.f1 * cm.sum(axis=1)).sum() / cm.sum()
    assert rep.macro_f1 == pytest.approx(expect)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 6), st.integers(1, 60), st.integers(0, 2**31 - 1))
def test_report_matches_counting_oracle(C, n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, C, n).tolist()
    preds = rng.integers(0, C, n).tolist()
    rep = classification_report(confusion_matrix(preds, labels, C))
    per_class, acc = report_oracle(preds, labels, C)
    for c, (p, r, f) in enumerate(per_class):
        assert abs(rep.precision[c] - p) <= 1e-12
        assert abs(rep.recall[c] - r) <= 1e-12
        assert abs(rep.f1[c] - f) <= 1e-12
    assert abs(rep.accuracy - acc) <= 1e-12
    assert rep.accuracy == accuracy(preds, labels)
    assert abs(rep.kappa - kappa_oracle(preds, labels, C)) <= 1e-12


# -- kappa ---------------------------------------------------------------------

def test_kappa_hand_example():
    # p_o = 35/50 = 0.7; p_e = (25*30 + 25*20) / 50^2 = 0.5; kappa = 0.2 / 0.5
    assert cohens_kappa(np.array([[20, 5], [10, 15]])) == pytest.approx(0.4, abs=1e-12)


def test_kappa_chance_agreement_is_zero():
    # independent predictions with matching marginals: cm = outer(row, col) / n
    cm = np.outer([10, 30], [20, 20])
    assert cohens_kappa(cm) == pytest.approx(0.0, abs=1e-12)


def test_kappa_degenerate_single_class():
    assert cohens_kappa(np.array([[5, 0], [0, 0]])) == 0.0


# -- AUC / AP -------------------------------------------------------------------

def test_auc_examples():
    labels = np.array([0, 0, 1, 1])
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]])
    r = roc_auc_ovr(scores, labels)
    np.testing.assert_array_equal(r.per_class, [1.0, 1.0])
    same = roc_auc_ovr(np.ones((4, 2)), labels)
    np.testing.assert_array_equal(same.per_class, [0.5, 0.5])


def test_auc_undefined_class_skipped():
    r = roc_auc_ovr(np.random.default_rng(0).random((5, 3)), np.array([0, 1, 0, 1, 1]))
    assert np.isnan(r.per_class[2]) and not r.defined[2]
    assert r.macro == pytest.approx(np.nanmean(r.per_class))
    with pytest.raises(MetricsError):
        roc_auc_ovr(np.ones((3, 1)), np.zeros(3, int))


def test_ap_examples():
    labels = np.array([1, 1, 0, 0, 0])
    s = np.array([[0, 5], [0, 4], [0, 3], [0, 2], [0, 1]], float)
    assert average_precision_ovr(s, labels).per_class[1] == 1.0
    one = np.array([1, 0, 0, 0])
    assert average_precision_ovr(np.array([[0, 9], [0, 1], [0, 2], [0, 3]], float), one).per_class[1] == 1.0


@pytest.mark.parametrize("seed", range(25))
def test_auc_ap_match_brute_force_exactly(seed):
    rng = np.random.default_rng(seed)
    n, C = 50, 4
    labels = rng.integers(0, C, n)
    scores = np.round(rng.random((n, C)), 1)       # coarse grid forces ties
    auc = roc_auc_ovr(scores, labels).per_class
    ap = average_precision_ovr(scores, labels).per_class
    for c in range(C):
        pos = (labels == c).tolist()
        if 0 < sum(pos) < n:
            assert auc[c] == auc_oracle(scores[:, c].tolist(), pos)
            assert ap[c] == ap_oracle(scores[:, c].tolist(), pos)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_auc_invariant_under_monotone_transform(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 30)
    scores = rng.normal(size=(30, 3))
    a = roc_auc_ovr(scores, labels).per_class
    b = roc_auc_ovr(np.exp(2 * scores) + 1, labels).per_class
    np.testing.assert_array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_class_permutation_consistency(C, seed):
    rng = np.random.default_rng(seed)
    cm = rng.integers(0, 20, (C, C))
    cm[0, 0] += 1
    perm = rng.permutation(C)
    a = classification_report(cm)
    b = classification_report(cm[np.ix_(perm, perm)])
    np.testing.assert_allclose(b.f1, a.f1[perm], atol=1e-15)
    assert b.macro_f1 == pytest.approx(a.macro_f1, abs=1e-12)
    assert b.kappa == pytest.approx(a.kappa, abs=1e-12)


def test_fuzz_ranges():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        C = int(rng.integers(2, 6))
        cm = rng.integers(0, 6, (C, C))
        if cm.sum() == 0:
            continue
        rep = classification_report(cm)
        for arr in (rep.precision, rep.recall, rep.f1):
            assert ((0 <= arr) & (arr <= 1)).all()
        assert 0 <= rep.accuracy <= 1
        assert -1 <= rep.kappa <= 1
        assert rep.accuracy == np.trace(cm) / cm.sum()


def test_evaluate_predictions_and_csv():
    rng = np.random.default_rng(1)
    labels = np.repeat(np.arange(3), 10)
    scores = rng.random((30, 3)) + np.eye(3)[labels]
    rep = evaluate_predictions(scores, labels, 3, class_names=["a", "b", "c"])
    assert rep.accuracy == 1.0 and rep.macro_auc == 1.0 and rep.macro_ap == 1.0
    d = rep.to_dict()
    assert [r["class"] for r in d["per_class"]] == ["a", "b", "c"]
    text = rows_to_csv([rep.summary_row("m")])
    assert text.splitlines()[0] == "model,precision,recall,f1,accuracy,kappa"
    assert text.splitlines()[1].startswith("m,1.000000,")
