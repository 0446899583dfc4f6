"""Subject-wise grouped k-fold splitting, bootstrap confidence intervals,
and the metric suite: confusion/PRF1, one-vs-rest ROC AUC, regression
errors, Bland-Altman agreement, and glucose unit conversion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParam, LengthMismatch

MGDL_PER_MMOL = 18.016
CLASS_NAMES = ("normal", "controlled", "high_glucose")


# ---------------------------------------------------------------------------
# Grouped, class-stratified k-fold
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: dict  # participant_id -> fold index

    def members(self, fold: int) -> list:
        return sorted(pid for pid, f in self.fold_of.items() if f == fold)

    def roles(self, fold: int):
        """(train_ids, val_ids, test_ids) for one cross-validation round."""
        test = set(self.members(fold))
        val = set(self.members((fold + 1) % self.k))
        train = {pid for pid, f in self.fold_of.items()
                 if pid not in test and pid not in val}
        return sorted(train), sorted(val), sorted(test)

    def digest(self) -> str:
        items = ",".join(f"{pid}:{f}" for pid, f in sorted(self.fold_of.items()))
        return f"k={self.k};{items}"


def group_kfold(participants, k: int, seed: int) -> FoldAssignment:
    """Class-stratified grouped split: within each class, shuffle participant
    ids by seed and deal them round-robin into k folds.

    `participants` is a sequence of (participant_id, class_index).
    """
    if k < 2:
        raise InvalidParam("k must be >= 2")
    by_class: dict = {}
    for pid, cls in participants:
        by_class.setdefault(cls, []).append(pid)
    for cls, ids in by_class.items():
        if len(ids) < k:
            raise InvalidParam(f"class {cls} has fewer than k participants")
    rng = np.random.default_rng(seed)
    fold_of = {}
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        order = rng.permutation(len(ids))
        for slot, idx in enumerate(order):
            fold_of[ids[idx]] = slot % k
    return FoldAssignment(k=k, fold_of=fold_of)


# ---------------------------------------------------------------------------
# Classification metrics
# ---------------------------------------------------------------------------

def confusion_and_prf1(y_true, y_pred, num_classes: int = 3):
    """Confusion matrix plus per-class / macro / weighted precision-recall-F1.

    Zero-denominator precision or recall is reported as 0 with a flag.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise LengthMismatch("y_true and y_pred must have equal length")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    per_class = []
    for c in range(num_classes):
        tp = confusion[c, c]
        fp = confusion[:, c].sum() - tp
        fn = confusion[c, :].sum() - tp
        undefined = False
        if tp + fp == 0:
            precision, undefined = 0.0, True
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            recall, undefined = 0.0, True
        else:
            recall = tp / (tp + fn)
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        per_class.append({"precision": float(precision), "recall": float(recall),
                          "f1": float(f1), "support": int(tp + fn),
                          "undefined": undefined})
    macro = {m: float(np.mean([pc[m] for pc in per_class]))
             for m in ("precision", "recall", "f1")}
    total = sum(pc["support"] for pc in per_class)
    weighted = {m: float(sum(pc[m] * pc["support"] for pc in per_class) / total)
                for m in ("precision", "recall", "f1")}
    return confusion, per_class, macro, weighted


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise LengthMismatch("y_true and y_pred must have equal length")
    return float(np.mean(y_true == y_pred))


def roc_auc_ovr(scores: np.ndarray, y_true, num_classes: int = 3):
    """One-vs-rest AUCs via the rank (Mann-Whitney) formulation; ties earn
    half credit. Returns (aucs, roc_points); an absent class yields None.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    if scores.shape != (len(y_true), num_classes):
        raise LengthMismatch("scores must be (n, num_classes)")
    aucs = []
    curves = []
    for c in range(num_classes):
        pos = y_true == c
        n_pos = int(pos.sum())
        n_neg = len(y_true) - n_pos
        s = scores[:, c]
        if n_pos == 0 or n_neg == 0:
            aucs.append(None)
            curves.append([])
            continue
        ranks = _average_ranks(s)
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(float(auc))
        curves.append(_roc_points(s, pos))
    return aucs, curves


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _roc_points(scores: np.ndarray, pos: np.ndarray) -> list:
    """(fpr, tpr) over all distinct thresholds, from (0,0) to (1,1)."""
    n_pos = pos.sum()
    n_neg = len(pos) - n_pos
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        for idx in order[i:j + 1]:
            if pos[idx]:
                tp += 1
            else:
                fp += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j + 1
    return points


# ---------------------------------------------------------------------------
# Regression and agreement metrics
# ---------------------------------------------------------------------------

def regression_metrics(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise LengthMismatch("pred and truth must have equal length")
    if len(pred) < 2:
        raise InvalidParam("need at least two points")
    d = pred - truth
    mae = float(np.mean(np.abs(d)))
    rmse = float(np.sqrt(np.mean(d ** 2)))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0 or pred.std() == 0.0:
        return {"mae": mae, "rmse": rmse, "pearson_r": None, "r2": None}
    r = float(np.corrcoef(pred, truth)[0, 1])
    r2 = float(1.0 - np.sum(d ** 2) / ss_tot)
    return {"mae": mae, "rmse": rmse, "pearson_r": r, "r2": r2}


def bland_altman(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise LengthMismatch("pred and truth must have equal length")
    if len(pred) < 2:
        raise InvalidParam("need at least two points")
    d = pred - truth
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    points = [(float(m), float(diff)) for m, diff in zip((pred + truth) / 2.0, d)]
    return {"bias": bias, "sd": sd,
            "loa_low": bias - 1.96 * sd, "loa_high": bias + 1.96 * sd}, points


def convert_glucose(value: float, to_mmol: bool) -> float:
    """mg/dL <-> mmol/L with a fixed factor of 18.016 mg/dL per mmol/L."""
    return value / MGDL_PER_MMOL if to_mmol else value * MGDL_PER_MMOL


# ---------------------------------------------------------------------------
# Participant-level bootstrap
# ---------------------------------------------------------------------------

def bootstrap_ci(stat, predictions: list, num_resamples: int = 1000, seed: int = 0):
    """95% percentile interval (nearest-rank) of `stat` over participant-level
    resamples with replacement. Each resample draws from its own
    counter-derived stream, so results are order-independent.
    """
    if num_resamples < 1:
        raise InvalidParam("need at least one resample")
    if not predictions:
        raise InvalidParam("predictions must be non-empty")
    n = len(predictions)
    vals = np.empty(num_resamples)
    for b in range(num_resamples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))
        idx = rng.integers(0, n, size=n)
        vals[b] = stat([predictions[i] for i in idx])
    vals.sort()
    lo = vals[_nearest_rank(0.025, num_resamples)]
    hi = vals[_nearest_rank(0.975, num_resamples)]
    return float(lo), float(hi)


def _nearest_rank(q: float, n: int) -> int:
    return min(max(int(np.ceil(q * n)) - 1, 0), n - 1)


# ---------------------------------------------------------------------------
# Canonical JSON serialization
# ---------------------------------------------------------------------------

def _write_canonical(obj, out: list, indent: int):
    pad = " " * indent
    inner = " " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        keys = sorted(obj, key=str)
        for i, k in enumerate(keys):
            out.append(f"{inner}{json.dumps(str(k))}: ")
            _write_canonical(obj[k], out, indent + 1)
            out.append(",\n" if i + 1 < len(keys) else "\n")
        out.append(pad + "}")
    elif isinstance(obj, np.ndarray):
        _write_canonical(obj.tolist(), out, indent)
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(inner)
            _write_canonical(v, out, indent + 1)
            out.append(",\n" if i + 1 < len(obj) else "\n")
        out.append(pad + "]")
    elif isinstance(obj, bool):
        out.append("true" if obj else "false")
    elif isinstance(obj, (np.floating, float)):
        if not np.isfinite(obj):
            out.append("null")
        else:
            out.append(format(float(obj), ".17g"))
    elif isinstance(obj, (np.integer, int)):
        out.append(str(int(obj)))
    elif obj is None:
        out.append("null")
    else:
        out.append(json.dumps(obj))


def canonical_json(obj) -> str:
    """Sorted keys, 17-significant-digit reals; bit-identical across runs."""
    out: list = []
    _write_canonical(obj, out, 0)
    return "".join(out)
