import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from sonoclip.metrics import (
    LeakageError,
    ProbeDataset,
    ProbeRun,
    Task,
    UndefinedMetricError,
    assert_disjoint,
    auroc,
    confusion_matrix,
    cv_harness,
    dsc,
    macro_f1,
    patient_folds,
    patient_split,
    read_runs,
    roc_curve,
    summarize,
    support_set_harness,
    wilcoxon_signed_rank,
    write_runs,
)


def pairwise_auroc(scores, labels):
    """Direct enumeration of every positive-negative pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def enumerate_wilcoxon(deltas):
    """Two-sided p-value by visiting every sign assignment of the ranked |deltas|."""
    d = np.asarray([x for x in deltas if x != 0], dtype=float)
    ranks = stats.rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    mean = ranks.sum() / 2
    extreme = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        w = float(np.dot(signs, ranks))
        if abs(w - mean) >= abs(w_obs - mean) - 1e-9:
            extreme += 1
    return extreme / 2 ** len(d)


# --------------------------------------------------------------------------- macro F1 and confusion

def test_perfect_f1():
    assert macro_f1(["a", "b", "c"], ["a", "b", "c"]) == 1.0


def test_two_class_degenerate_by_hand():
    # class 0: precision 0.5, recall 1 -> F1 2/3; class 1 never predicted -> 0
    assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1], classes=[0, 1]) == pytest.approx(1 / 3)


def test_absent_class_counts_zero():
    assert macro_f1(["a", "a"], ["a", "a"], classes=["a", "b"]) == pytest.approx(0.5)


def test_label_outside_classes_rejected():
    with pytest.raises(ValueError):
        macro_f1(["a"], ["z"], classes=["a"])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40), st.permutations(range(4)))
def test_f1_invariant_to_relabeling(pairs, perm):
    preds, labels = zip(*pairs)
    a = macro_f1(preds, labels, classes=range(4))
    b = macro_f1([perm[p] for p in preds], [perm[t] for t in labels], classes=range(4))
    assert a == pytest.approx(b)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_confusion_matrix_contract(pairs):
    preds, labels = zip(*pairs)
    cm = confusion_matrix(preds, labels, [0, 1, 2])
    assert cm.sum() == len(pairs)
    assert cm.sum(axis=1).tolist() == [labels.count(c) for c in range(3)]
    np.testing.assert_array_equal(confusion_matrix(labels, preds, [0, 1, 2]), cm.T)


def test_perfect_confusion_is_diagonal():
    cm = confusion_matrix([0, 1, 1, 2], [0, 1, 1, 2], [0, 1, 2])
    np.testing.assert_array_equal(cm, np.diag([1, 2, 1]))


def test_f1_matches_sklearn_route():
    from sklearn.metrics import f1_score

    rng = np.random.default_rng(0)
    for _ in range(20):
        y, p = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        assert macro_f1(p, y, classes=range(4)) == pytest.approx(
            f1_score(y, p, labels=range(4), average="macro", zero_division=0))


# --------------------------------------------------------------------------- AUROC

def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5
    assert auroc([0.9, 0.2, 0.8, 0.3], [1, 0, 1, 0]) == 1.0


def test_auroc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_auroc_matches_enumeration_and_is_rank_invariant(rows):
    scores, labels = map(np.array, zip(*rows))
    if labels.min() == labels.max():
        return
    a = auroc(scores, labels)
    assert a == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)
    assert auroc(np.exp(scores) * 3 - 7, labels) == pytest.approx(a, abs=1e-12)


def test_auroc_large_n_rank_route():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 12_000)
    s = rng.normal(size=y.size) + y
    from sklearn.metrics import roc_auc_score

    assert auroc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)


def test_roc_curve_endpoints():
    fpr, tpr = roc_curve([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0])
    assert (fpr[0], tpr[0]) == (0.0, 0.0) and (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(auroc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]))


# --------------------------------------------------------------------------- DSC

def test_dsc_examples():
    a = np.zeros((20, 20), bool)
    a[:10, :10] = True
    assert dsc(a, a) == 1.0
    b = np.zeros_like(a)
    b[10:, 10:] = True
    assert dsc(a, b) == 0.0
    c = np.zeros_like(a)
    c[:10, 5:15] = True  # 100 pixels, 50 shared with a
    assert dsc(a, c) == 0.5
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError):
        dsc(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50))
def test_dsc_symmetric(rows):
    a, b = map(np.array, zip(*rows))
    assert dsc(a, b) == dsc(b, a)


# --------------------------------------------------------------------------- Wilcoxon

def test_all_positive_five():
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5], method="exact") == pytest.approx(2 / 32)
    assert enumerate_wilcoxon([1, 2, 3, 4, 5]) == pytest.approx(2 / 32)


def test_symmetric_deltas_give_one():
    assert wilcoxon_signed_rank([-1, 1, -2, 2, -3, 3]) == pytest.approx(1.0)


def test_all_zero_undefined():
    with pytest.raises(UndefinedMetricError):
        wilcoxon_signed_rank([0, 0, 0, 0, 0])
    with pytest.raises(UndefinedMetricError):
        wilcoxon_signed_rank([1, 2, 0, 0, 3])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(-6, 6).filter(lambda v: v != 0), min_size=5, max_size=11))
def test_exact_matches_sign_enumeration(deltas):
    assert wilcoxon_signed_rank(deltas, method="exact") == pytest.approx(enumerate_wilcoxon(deltas), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 25), st.integers(0, 10**6))
def test_exact_matches_scipy_without_ties(n, seed):
    d = np.random.default_rng(seed).permutation(np.arange(1, n + 1)) * np.random.default_rng(seed + 1).choice([-1, 1], n)
    ours = wilcoxon_signed_rank(d, method="exact")
    assert ours == pytest.approx(stats.wilcoxon(d, method="exact").pvalue, abs=1e-12)
    assert 0 < ours <= 1


def test_exact_and_normal_agree_at_25():
    rng = np.random.default_rng(7)
    for _ in range(10):
        d = rng.normal(0.3, 1.0, 25)
        assert abs(wilcoxon_signed_rank(d, "exact") - wilcoxon_signed_rank(d, "approx")) <= 0.01


def test_p_monotone_in_distance_from_center():
    ranks = np.arange(1, 9)
    ps = []
    for k in range(9):
        # the k smallest ranks negative -> W moves away from its mean as k shrinks
        d = ranks.astype(float).copy()
        d[:k] *= -1
        ps.append(wilcoxon_signed_rank(d, "exact"))
    # W+ = 36 - k(k+1)/2, center 18; distance falls as k approaches 5
    dist = [abs(36 - k * (k + 1) / 2 - 18) for k in range(9)]
    order = np.argsort(dist)
    assert all(ps[order[i]] >= ps[order[i + 1]] - 1e-12 for i in range(8))


# --------------------------------------------------------------------------- harnesses

class MeanClassifier:
    """Predicts the nearest class mean; a cheap stand-in probe."""

    def __init__(self, X, y):
        y = np.asarray(y)
        self.classes = np.unique(y)
        self.means = np.stack([X[y == c].mean(axis=0) for c in self.classes])

    def predict(self, X):
        return self.classes[((X[:, None] - self.means[None]) ** 2).sum(-1).argmin(1)]


def toy_dataset(n_patients=40, per=3, seed=0):
    rng = np.random.default_rng(seed)
    pids, X, y = [], [], []
    for p in range(n_patients):
        c = p % 4
        for _ in range(per):
            pids.append(f"p{p:03d}")
            X.append(rng.normal(size=6) + 3 * np.eye(6)[c])
            y.append(c)
    return ProbeDataset(np.array(X), np.array(y), pids)


def recording_trainer(log):
    def trainer(Xtr, ytr, Xva, yva, seed):
        log.append((len(Xtr), len(Xva), seed))
        return MeanClassifier(Xtr, ytr)
    return trainer


def test_cv_harness_25_runs_without_leakage():
    ds = toy_dataset()
    log = []
    runs = cv_harness(ds, Task("view"), recording_trainer(log))
    assert len(runs) == 25
    assert {(r.fold, r.seed_index) for r in runs} == {(f, s) for f in range(5) for s in range(5)}
    assert len({seed for *_, seed in log}) == 25
    train_p, test_p = patient_split(ds.patient_ids, list(ds.y))
    assert not set(train_p) & set(test_p)
    assert len(test_p) == 8


def test_fold_sizes_balanced_and_reproducible():
    ds = toy_dataset(43)
    train_p, _ = patient_split(ds.patient_ids, list(ds.y))
    strata = {p: int(y) for p, y in zip(ds.patient_ids, ds.y)}
    folds = patient_folds(train_p, strata)
    sizes = np.bincount(list(folds.values()))
    assert sizes.max() - sizes.min() <= 1
    assert folds == patient_folds(train_p, strata)


def test_harness_reruns_identical():
    ds = toy_dataset()
    a = [r.value for r in cv_harness(ds, Task("view"), recording_trainer([]), master_seed=3)]
    b = [r.value for r in cv_harness(ds, Task("view"), recording_trainer([]), master_seed=3)]
    assert a == b


def test_leaky_test_set_detected():
    with pytest.raises(LeakageError):
        assert_disjoint(train=["a", "b"], test=["b"])


def test_support_sets():
    ds = toy_dataset(10)
    seen = []

    def trainer(Xtr, ytr, Xva, yva, seed):
        seen.append((Xtr, Xva))
        return MeanClassifier(Xtr, ytr) if len(np.unique(ytr)) > 1 else _Constant(ytr[0])

    runs = support_set_harness(ds, 2, Task("view"), trainer, test_patients=["p000", "p001"])
    assert len(runs) == 25 and all(r.support_size == 2 for r in runs)
    # 2 train + 2 validation patients, 3 images each
    assert all(len(a) == 6 and len(b) == 6 for a, b in seen)


def test_support_set_requires_patients():
    with pytest.raises(ValueError):
        support_set_harness(toy_dataset(10), 8, Task("view"), recording_trainer([]))


class _Constant:
    def __init__(self, c):
        self.c = c

    def predict(self, X):
        return np.full(len(X), self.c)


def test_runs_roundtrip_and_summary(tmp_path):
    runs = [ProbeRun("view", f, s, "macro_f1", 0.5 + 0.01 * f, "m") for f in range(5) for s in range(5)]
    write_runs(runs, tmp_path / "r.jsonl")
    assert read_runs(tmp_path / "r.jsonl") == runs
    (row,) = summarize(runs)
    assert row["n_runs"] == 25 and row["mean"] == pytest.approx(0.52)
    assert runs[0].timestamp is None
