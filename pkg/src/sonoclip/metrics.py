"""Metrics, patient-wise evaluation harnesses and the signed-rank test."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from typing import Callable, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    pass


class LeakageError(AssertionError):
    pass


# --------------------------------------------------------------------------- point metrics

def _check_classes(values, classes, what):
    unknown = set(values) - set(classes)
    if unknown:
        raise ValueError(f"{what} outside the class set: {sorted(map(str, unknown))[:5]}")


def confusion_matrix(preds, labels, classes) -> np.ndarray:
    """Counts with rows indexed by true class and columns by prediction."""
    classes = list(classes)
    if not classes:
        raise ValueError("classes must be nonempty")
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels):
        raise ValueError("preds and labels differ in length")
    _check_classes(labels, classes, "label")
    _check_classes(preds, classes, "prediction")
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(preds, labels):
        cm[index[t], index[p]] += 1
    return cm


def macro_f1(preds, labels, classes=None) -> float:
    """Unweighted mean of per-class F1; a class never seen nor predicted scores 0."""
    preds, labels = list(preds), list(labels)
    if classes is None:
        classes = sorted(set(labels) | set(preds))
    cm = confusion_matrix(preds, labels, classes)
    tp = np.diag(cm).astype(float)
    denom = cm.sum(axis=0) + cm.sum(axis=1)
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return float(f1.mean())


def auroc(scores, labels) -> float:
    """P(positive outranks negative) + half the tie probability."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative samples")
    if len(scores) <= 10_000:
        wins = 0.0
        for chunk in np.array_split(pos, max(1, len(pos) // 1024)):
            d = chunk[:, None] - neg[None, :]
            wins += (d > 0).sum() + 0.5 * (d == 0).sum()
        return float(wins / (len(pos) * len(neg)))
    from scipy.stats import rankdata

    r = rankdata(scores)
    return float((r[labels == 1].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(false-positive rate, true-positive rate) at every distinct threshold."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    cut = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    return np.r_[0.0, fp / max(fp[-1], 1)], np.r_[0.0, tp / max(tp[-1], 1)]


def dsc(pred, true) -> float:
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    for m in (pred, true):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise ValueError("masks must be binary")
    a, b = pred.astype(bool), true.astype(bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(a, b).sum() / total)


# --------------------------------------------------------------------------- signed-rank test

def _doubled_ranks(x: np.ndarray) -> np.ndarray:
    """Twice the average ranks of x (integers even with ties)."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.int64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + 1) + (j + 1)
        i = j + 1
    return ranks


def signed_rank_distribution(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Null counts of the doubled positive-rank sum, indexed by its value."""
    total = int(np.sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = counts[:-r].copy()
        counts[r:] += shifted
    return counts


def wilcoxon_signed_rank(deltas, method: str = "auto") -> float:
    """Two-sided p-value for paired differences; zeros are dropped.

    ``method`` is ``"exact"``, ``"approx"`` (normal, continuity-corrected)
    or ``"auto"`` (exact up to 25 nonzero differences).
    """
    d = np.asarray(deltas, dtype=float).ravel()
    d = d[d != 0]
    if len(d) == 0:
        raise UndefinedMetricError("all differences are zero")
    if len(d) < 5:
        raise UndefinedMetricError(f"need at least 5 nonzero differences, got {len(d)}")
    n = len(d)
    r2 = _doubled_ranks(np.abs(d))
    w2 = int(r2[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= 25 else "approx"
    if method == "exact":
        counts = signed_rank_distribution(r2)
        total = 2 ** n
        lower = sum(counts[: w2 + 1])
        upper = sum(counts[w2:])
        return float(min(1, 2 * min(lower, upper) / total))
    if method != "approx":
        raise ValueError(f"unknown method {method!r}")
    w = w2 / 2
    mean = n * (n + 1) / 4
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24 - (tie_sizes ** 3 - tie_sizes).sum() / 48
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, math.erfc(z / math.sqrt(2))))


# --------------------------------------------------------------------------- harnesses

@dataclass
class ProbeRun:
    task: str
    fold: int
    seed_index: int
    metric: str
    value: float
    model: str = ""
    mode: str = "cv"
    support_size: int | None = None
    timestamp: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def write_runs(runs: Sequence[ProbeRun], path) -> None:
    with open(path, "w") as fh:
        for r in runs:
            fh.write(r.to_json() + "\n")


def read_runs(path) -> list[ProbeRun]:
    with open(path) as fh:
        return [ProbeRun(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class ProbeDataset:
    """Features (or images), targets and a patient id per sample."""

    X: object
    y: object
    patient_ids: Sequence[str]

    def __post_init__(self):
        if len(self.X) != len(self.y) or len(self.X) != len(self.patient_ids):
            raise ValueError("X, y and patient_ids must have equal length")
        if any(p is None or p == "" for p in self.patient_ids):
            raise ValueError("every sample needs a patient id")

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return _take(self.X, idx), _take(self.y, idx)


def _take(a, idx):
    if isinstance(a, np.ndarray):
        return a[idx]
    return [a[i] for i in idx]


@dataclass(frozen=True)
class Task:
    """A named evaluation: metric is ``macro_f1``, ``auroc`` or ``dsc``."""

    name: str
    metric: str = "macro_f1"
    classes: tuple | None = None

    def __post_init__(self):
        if self.metric not in ("macro_f1", "auroc", "dsc"):
            raise ValueError(f"unknown metric {self.metric!r}")

    def score(self, estimator, X, y) -> float:
        if self.metric == "macro_f1":
            return macro_f1(estimator.predict(X), list(y), self.classes)
        if self.metric == "auroc":
            return auroc(estimator.predict_proba(X)[:, 1], np.asarray(y))
        preds = estimator.predict(X)
        return float(np.mean([dsc(p, t) for p, t in zip(preds, y)]))

    def strata(self, y) -> list | None:
        return None if self.metric == "dsc" else list(y)


Trainer = Callable[[object, object, object, object, int], object]


def run_seed(master_seed: int, group: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, group, index]).generate_state(1)[0])


def _patient_strata(patient_ids, labels) -> dict[str, object]:
    """Each patient's majority label (ties -> smallest label)."""
    votes: dict[str, dict] = {}
    for p, lab in zip(patient_ids, labels if labels is not None else [0] * len(patient_ids)):
        votes.setdefault(p, {}).setdefault(lab, 0)
        votes[p][lab] += 1
    return {p: min(v, key=lambda k: (-v[k], str(k))) for p, v in votes.items()}


def patient_split(patient_ids, labels=None, test_fraction: float = 0.2, seed: int = 0):
    """Stratified patient-level train/test split; returns (train, test) patient lists."""
    strata = _patient_strata(patient_ids, labels)
    rng = np.random.default_rng([seed, 0])
    train, test = [], []
    for key in sorted(set(strata.values()), key=str):
        members = sorted(p for p, s in strata.items() if s == key)
        members = [members[i] for i in rng.permutation(len(members))]
        k = int(round(test_fraction * len(members)))
        test += members[:k]
        train += members[k:]
    return sorted(train), sorted(test)


def patient_folds(patients, strata: dict, n_folds: int = 5, seed: int = 0) -> dict[str, int]:
    """Stratified round-robin fold assignment; fold sizes differ by at most one patient."""
    if len(patients) < n_folds:
        raise ValueError(f"{len(patients)} patients cannot fill {n_folds} folds")
    rng = np.random.default_rng([seed, 1])
    ordered = []
    for key in sorted({strata[p] for p in patients}, key=str):
        members = sorted(p for p in patients if strata[p] == key)
        ordered += [members[i] for i in rng.permutation(len(members))]
    return {p: i % n_folds for i, p in enumerate(ordered)}


def _indices(patient_ids, chosen) -> np.ndarray:
    chosen = set(chosen)
    return np.array([i for i, p in enumerate(patient_ids) if p in chosen], dtype=int)


def assert_disjoint(**groups) -> None:
    names = list(groups)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            shared = set(groups[a]) & set(groups[b])
            if shared:
                raise LeakageError(f"patients shared between {a} and {b}: {sorted(shared)[:5]}")


def _run_one(dataset, task, trainer, tr, va, te, seed):
    Xtr, ytr = dataset.take(tr)
    Xva, yva = dataset.take(va)
    Xte, yte = dataset.take(te)
    est = trainer(Xtr, ytr, Xva, yva, seed)
    return task.score(est, Xte, yte)


def _execute(jobs, n_jobs):
    if n_jobs == 1:
        return [f(*a) for f, a in jobs]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(delayed(f)(*a) for f, a in jobs)


def _stamp(timestamps: bool):
    return datetime.now(timezone.utc).isoformat(timespec="seconds") if timestamps else None


def cv_harness(
    dataset: ProbeDataset,
    task: Task,
    trainer: Trainer,
    master_seed: int = 0,
    n_folds: int = 5,
    n_seeds: int = 5,
    test_patients: Sequence[str] | None = None,
    model_name: str = "",
    n_jobs: int = 1,
    timestamps: bool = False,
) -> list[ProbeRun]:
    """Patient-wise 80/20 split, then stratified k-fold CV on the training part.

    Each (fold, seed) trains on k-1 folds, validates on the held-out fold
    and is scored on the untouched test patients.
    """
    pids = list(dataset.patient_ids)
    labels = task.strata(dataset.y)
    if test_patients is None:
        train_p, test_p = patient_split(pids, labels, seed=master_seed)
    else:
        test_p = sorted(set(test_patients))
        train_p = sorted(set(pids) - set(test_p))
    assert_disjoint(train=train_p, test=test_p)
    strata = _patient_strata(pids, labels)
    folds = patient_folds(train_p, strata, n_folds, master_seed)
    te = _indices(pids, test_p)
    jobs, keys = [], []
    for f in range(n_folds):
        val_p = [p for p in train_p if folds[p] == f]
        fit_p = [p for p in train_p if folds[p] != f]
        assert_disjoint(train=fit_p, validation=val_p, test=test_p)
        tr, va = _indices(pids, fit_p), _indices(pids, val_p)
        for s in range(n_seeds):
            jobs.append((_run_one, (dataset, task, trainer, tr, va, te, run_seed(master_seed, f, s))))
            keys.append((f, s))
    values = _execute(jobs, n_jobs)
    return [ProbeRun(task.name, f, s, task.metric, float(v), model_name, "cv", None, _stamp(timestamps))
            for (f, s), v in zip(keys, values)]


def support_set_harness(
    dataset: ProbeDataset,
    n_patients: int,
    task: Task,
    trainer: Trainer,
    master_seed: int = 0,
    n_sets: int = 5,
    n_seeds: int = 5,
    test_patients: Sequence[str] | None = None,
    model_name: str = "",
    n_jobs: int = 1,
    timestamps: bool = False,
) -> list[ProbeRun]:
    """Data-efficiency runs: N training and N validation patients per support set."""
    pids = list(dataset.patient_ids)
    labels = task.strata(dataset.y)
    if test_patients is None:
        pool, test_p = patient_split(pids, labels, seed=master_seed)
    else:
        test_p = sorted(set(test_patients))
        pool = sorted(set(pids) - set(test_p))
    if len(pool) < 2 * n_patients:
        raise ValueError(f"support sets of {n_patients}+{n_patients} patients need {2 * n_patients}, "
                         f"only {len(pool)} available")
    te = _indices(pids, test_p)
    jobs, keys = [], []
    for k in range(n_sets):
        rng = np.random.default_rng([master_seed, n_patients, k])
        chosen = [pool[i] for i in rng.choice(len(pool), 2 * n_patients, replace=False)]
        fit_p, val_p = chosen[:n_patients], chosen[n_patients:]
        assert_disjoint(train=fit_p, validation=val_p, test=test_p)
        tr, va = _indices(pids, fit_p), _indices(pids, val_p)
        for s in range(n_seeds):
            jobs.append((_run_one, (dataset, task, trainer, tr, va, te, run_seed(master_seed, 1000 + k, s))))
            keys.append((k, s))
    values = _execute(jobs, n_jobs)
    return [ProbeRun(task.name, k, s, task.metric, float(v), model_name, "support", n_patients, _stamp(timestamps))
            for (k, s), v in zip(keys, values)]


def summarize(runs: Sequence[ProbeRun]) -> list[dict]:
    """Mean, std and median per (model, task, metric, mode, support size)."""
    groups: dict[tuple, list[float]] = {}
    for r in runs:
        groups.setdefault((r.model, r.task, r.metric, r.mode, r.support_size), []).append(r.value)
    out = []
    for (model, task, metric, mode, n), vals in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        v = np.asarray(vals)
        out.append({"model": model, "task": task, "metric": metric, "mode": mode, "support_size": n,
                    "n_runs": len(v), "mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
                    "median": float(np.median(v))})
    return out


def plot_summary(summary: Sequence[dict], path) -> None:
    """Bar chart of mean metric with std error bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [f"{s['model'] or 'model'}\n{s['task']}" + (f" N={s['support_size']}" if s["support_size"] else "")
              for s in summary]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(summary)), 3.5))
    ax.bar(range(len(summary)), [s["mean"] for s in summary], yerr=[s["std"] for s in summary], capsize=4)
    ax.set_xticks(range(len(summary)), labels, fontsize=7)
    ax.set_ylabel("metric")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_roc(scores, labels, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fpr, tpr = roc_curve(scores, labels)
    fig, ax = plt.subplots(figsize=(3.5, 3.5))
    ax.plot(fpr, tpr, label=f"AUROC {auroc(scores, labels):.3f}")
    ax.plot([0, 1], [0, 1], ls="--", c="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


__all__ = [
    "LeakageError",
    "ProbeDataset",
    "ProbeRun",
    "Task",
    "UndefinedMetricError",
    "auroc",
    "confusion_matrix",
    "cv_harness",
    "dsc",
    "macro_f1",
    "patient_folds",
    "patient_split",
    "read_runs",
    "roc_curve",
    "run_seed",
    "summarize",
    "support_set_harness",
    "wilcoxon_signed_rank",
    "write_runs",
]
