"""Splitting, metric, agreement, and bootstrap tests.

The AUC tests check the rank formulation against a brute-force pair-counting
oracle; the classification fixtures are well-known reference per-class counts and
scores this artifact treats as consistency anchors.
"""

import numpy as np
import pytest

from scleraglunet.errors import InvalidParam, LengthMismatch
from scleraglunet.evalkit import (
    MGDL_PER_MMOL,
    accuracy,
    bland_altman,
    bootstrap_ci,
    canonical_json,
    confusion_and_prf1,
    convert_glucose,
    group_kfold,
    regression_metrics,
    roc_auc_ovr,
)


# ---------------------------------------------------------------------------
# Grouped stratified k-fold
# ---------------------------------------------------------------------------

def _cohort_ids(counts=(150, 140, 155)):
    pairs = []
    i = 0
    for cls, n in enumerate(counts):
        for _ in range(n):
            pairs.append((f"P{i:04d}", cls))
            i += 1
    return pairs


def test_kfold_sizes_and_strata():
    folds = group_kfold(_cohort_ids(), k=5, seed=0)
    pairs = dict(_cohort_ids())
    for f in range(5):
        members = folds.members(f)
        assert len(members) == 89
        counts = [sum(1 for m in members if pairs[m] == c) for c in range(3)]
        assert counts == [30, 28, 31]


def test_kfold_partition():
    pairs = _cohort_ids((20, 20, 20))
    folds = group_kfold(pairs, k=4, seed=7)
    seen = [pid for f in range(4) for pid in folds.members(f)]
    assert sorted(seen) == sorted(p for p, _ in pairs)
    assert len(seen) == len(set(seen))


def test_kfold_roles_disjoint():
    folds = group_kfold(_cohort_ids((10, 10, 10)), k=5, seed=3)
    for f in range(5):
        train, val, test = folds.roles(f)
        assert not set(train) & set(val)
        assert not set(train) & set(test)
        assert not set(val) & set(test)
        assert sorted(train + val + test) == sorted(folds.fold_of)


def test_kfold_validation_rotates():
    folds = group_kfold(_cohort_ids((5, 5, 5)), k=5, seed=1)
    _, val, _ = folds.roles(4)
    assert val == folds.members(0)


def test_kfold_preconditions():
    with pytest.raises(InvalidParam):
        group_kfold(_cohort_ids((5, 5, 5)), k=1, seed=0)
    with pytest.raises(InvalidParam):
        group_kfold(_cohort_ids((2, 5, 5)), k=3, seed=0)


def test_kfold_deterministic_digest():
    a = group_kfold(_cohort_ids((8, 8, 8)), k=4, seed=5)
    b = group_kfold(_cohort_ids((8, 8, 8)), k=4, seed=5)
    c = group_kfold(_cohort_ids((8, 8, 8)), k=4, seed=6)
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


# ---------------------------------------------------------------------------
# Confusion / precision / recall / F1
# ---------------------------------------------------------------------------

def test_recall_from_reference_counts():
    # per-class diagonal counts 141/150, 129/140, 145/155
    y_true = [0] * 150 + [1] * 140 + [2] * 155
    y_pred = ([0] * 141 + [1] * 9) + ([1] * 129 + [2] * 11) + ([2] * 145 + [0] * 10)
    _, per_class, _, _ = confusion_and_prf1(y_true, y_pred)
    assert per_class[0]["recall"] == pytest.approx(141 / 150)
    assert per_class[1]["recall"] == pytest.approx(129 / 140)
    assert per_class[2]["recall"] == pytest.approx(145 / 155)
    assert per_class[0]["recall"] == pytest.approx(0.940, abs=5e-4)


def test_f1_recomputation_from_reference_scores():
    def f1(p, r):
        return 2 * p * r / (p + r)

    assert f1(0.934, 0.940) == pytest.approx(0.937, abs=1e-3)
    assert f1(0.915, 0.921) == pytest.approx(0.918, abs=1e-3)
    assert f1(0.948, 0.935) == pytest.approx(0.942, abs=1e-3)


def test_weighted_f1_fixture():
    f1s = np.array([0.937, 0.918, 0.942])
    supports = np.array([150, 140, 155])
    weighted = float((f1s * supports).sum() / supports.sum())
    assert weighted == pytest.approx(0.933, abs=1e-3)


def test_perfect_predictions():
    y = [0, 1, 2, 0, 1, 2]
    confusion, per_class, macro, weighted = confusion_and_prf1(y, y)
    assert np.array_equal(confusion, np.diag([2, 2, 2]))
    for c in range(3):
        assert per_class[c]["f1"] == 1.0
    assert macro["f1"] == 1.0 and weighted["f1"] == 1.0


def test_confusion_row_sums_are_supports():
    rng = np.random.default_rng(0)
    y_true = rng.integers(0, 3, size=60)
    y_pred = rng.integers(0, 3, size=60)
    confusion, _, _, _ = confusion_and_prf1(y_true, y_pred)
    assert np.array_equal(confusion.sum(axis=1),
                          np.bincount(y_true, minlength=3))


def test_macro_f1_relabel_invariance():
    rng = np.random.default_rng(1)
    y_true = rng.integers(0, 3, size=80)
    y_pred = rng.integers(0, 3, size=80)
    _, _, macro, _ = confusion_and_prf1(y_true, y_pred)
    perm = np.array([2, 0, 1])
    _, _, macro_p, _ = confusion_and_prf1(perm[y_true], perm[y_pred])
    assert macro["f1"] == pytest.approx(macro_p["f1"], abs=1e-12)


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        confusion_and_prf1([0, 1], [0])
    with pytest.raises(LengthMismatch):
        accuracy([0, 1], [0])


# ---------------------------------------------------------------------------
# ROC AUC
# ---------------------------------------------------------------------------

def _pair_auc(scores, pos):
    """O(n^2) pair-counting oracle with half credit for ties."""
    pos_s = scores[pos]
    neg_s = scores[~pos]
    wins = 0.0
    for p in pos_s:
        for n in neg_s:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos_s) * len(neg_s))


def test_auc_perfect_separation():
    scores = np.array([[0.9, 0.05, 0.05]] * 3 + [[0.1, 0.8, 0.1]] * 3
                      + [[0.1, 0.1, 0.8]] * 3)
    aucs, _ = roc_auc_ovr(scores, [0] * 3 + [1] * 3 + [2] * 3)
    assert aucs == [1.0, 1.0, 1.0]


def test_auc_all_ties_half():
    scores = np.full((6, 3), 1 / 3)
    aucs, _ = roc_auc_ovr(scores, [0, 0, 1, 1, 2, 2])
    assert aucs == [0.5, 0.5, 0.5]


def test_auc_equals_pair_oracle():
    rng = np.random.default_rng(2)
    for _ in range(10):
        n = int(rng.integers(5, 40))
        y = rng.integers(0, 3, size=n)
        if len(set(y.tolist())) < 3:
            continue
        # quantized scores to force ties
        scores = np.round(rng.random((n, 3)), 1)
        aucs, _ = roc_auc_ovr(scores, y)
        for c in range(3):
            assert aucs[c] == _pair_auc(scores[:, c], y == c)


def test_auc_absent_class_missing():
    scores = np.full((4, 3), 1 / 3)
    aucs, _ = roc_auc_ovr(scores, [0, 0, 1, 1])
    assert aucs[2] is None


def test_auc_matches_trapezoid_curve():
    rng = np.random.default_rng(3)
    y = rng.integers(0, 3, size=50)
    scores = rng.random((50, 3))
    aucs, curves = roc_auc_ovr(scores, y)
    for c in range(3):
        pts = sorted(curves[c])
        area = sum((x1 - x0) * (y0 + y1) / 2.0
                   for (x0, y0), (x1, y1) in zip(pts, pts[1:]))
        assert aucs[c] == pytest.approx(area, abs=1e-12)


# ---------------------------------------------------------------------------
# Regression and agreement
# ---------------------------------------------------------------------------

def test_regression_identity():
    truth = [90.0, 120.0, 180.0, 210.0]
    m = regression_metrics(truth, truth)
    assert m["mae"] == 0.0 and m["rmse"] == 0.0
    assert m["pearson_r"] == pytest.approx(1.0)
    assert m["r2"] == pytest.approx(1.0)


def test_regression_constant_offset():
    truth = np.array([100.0, 130.0, 160.0, 190.0])
    m = regression_metrics(truth + 5.0, truth)
    assert m["mae"] == pytest.approx(5.0)
    assert m["rmse"] == pytest.approx(5.0)
    assert m["pearson_r"] == pytest.approx(1.0)
    n = len(truth)
    assert m["r2"] == pytest.approx(1.0 - 25.0 * n / np.sum((truth - truth.mean()) ** 2))


def test_regression_hand_worked():
    pred = np.array([1.0, 2.0, 4.0, 3.0, 5.0])
    truth = np.array([1.5, 2.5, 3.5, 3.0, 4.5])
    d = pred - truth
    m = regression_metrics(pred, truth)
    assert m["mae"] == pytest.approx(np.mean(np.abs(d)), abs=1e-12)
    assert m["rmse"] == pytest.approx(np.sqrt(np.mean(d ** 2)), abs=1e-12)
    sp = pred - pred.mean()
    st = truth - truth.mean()
    r = np.sum(sp * st) / np.sqrt(np.sum(sp ** 2) * np.sum(st ** 2))
    assert m["pearson_r"] == pytest.approx(r, abs=1e-12)
    assert m["r2"] == pytest.approx(1 - np.sum(d ** 2) / np.sum(st ** 2), abs=1e-12)


def test_bland_altman_reference_loa():
    # back-derive a sample with bias 1.45 and sd 4.99, then check the LoA
    base = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])
    d = base / base.std(ddof=1) * 4.99 + 1.45
    truth = np.linspace(100, 200, len(d))
    stats, _ = bland_altman(truth + d, truth)
    assert stats["bias"] == pytest.approx(1.45, abs=1e-9)
    assert stats["sd"] == pytest.approx(4.99, abs=1e-9)
    assert stats["loa_low"] == pytest.approx(-8.33, abs=0.01)
    assert stats["loa_high"] == pytest.approx(11.23, abs=0.01)


def test_bland_altman_identity():
    truth = np.array([90.0, 140.0, 190.0])
    stats, points = bland_altman(truth, truth)
    assert stats["bias"] == 0.0 and stats["sd"] == 0.0
    assert stats["loa_low"] == 0.0 and stats["loa_high"] == 0.0
    assert all(diff == 0.0 for _, diff in points)


def test_bland_altman_two_point_sd():
    truth = np.array([100.0, 100.0])
    stats, _ = bland_altman(truth + np.array([1.0, -1.0]), truth)
    assert stats["sd"] == pytest.approx(np.sqrt(2.0))
    assert stats["loa_high"] == pytest.approx(1.96 * np.sqrt(2.0), abs=1e-3)


def test_bland_altman_loa_identity():
    rng = np.random.default_rng(4)
    truth = rng.uniform(80, 250, size=30)
    pred = truth + rng.normal(0, 8, size=30)
    stats, _ = bland_altman(pred, truth)
    assert stats["loa_high"] - stats["loa_low"] == pytest.approx(
        2 * 1.96 * stats["sd"], abs=1e-12)


def test_convert_glucose():
    assert convert_glucose(100.0, to_mmol=True) == pytest.approx(5.5506, abs=1e-4)
    assert convert_glucose(0.08, to_mmol=False) == pytest.approx(1.4413, abs=1e-4)
    v = 123.456
    assert convert_glucose(convert_glucose(v, True), False) == pytest.approx(v, abs=1e-12)
    assert MGDL_PER_MMOL == 18.016


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

def test_bootstrap_constant_statistic():
    preds = [(i, True) for i in range(40)]
    stat = lambda sample: float(np.mean([ok for _, ok in sample]))
    lo, hi = bootstrap_ci(stat, preds, num_resamples=200, seed=0)
    assert (lo, hi) == (1.0, 1.0)


def test_bootstrap_brackets_point_estimate():
    rng = np.random.default_rng(5)
    for seed in range(20):
        flags = rng.random(100) < 0.8
        preds = list(flags)
        stat = lambda sample: float(np.mean(sample))
        lo, hi = bootstrap_ci(stat, preds, num_resamples=300, seed=seed)
        point = float(np.mean(flags))
        assert lo <= point <= hi


def test_bootstrap_deterministic():
    preds = list(np.random.default_rng(6).random(30))
    stat = lambda sample: float(np.mean(sample))
    a = bootstrap_ci(stat, preds, num_resamples=100, seed=9)
    b = bootstrap_ci(stat, preds, num_resamples=100, seed=9)
    assert a == b


def test_bootstrap_width_shrinks_with_n():
    stat = lambda sample: float(np.mean(sample))
    widths = []
    for n in (50, 100, 200):
        per_seed = []
        for seed in range(7):
            rng = np.random.default_rng(1000 + seed)
            flags = (rng.random(n) < 0.8).astype(float)
            lo, hi = bootstrap_ci(stat, list(flags), num_resamples=200, seed=seed)
            per_seed.append(hi - lo)
        widths.append(float(np.median(per_seed)))
    assert widths[0] > widths[1] > widths[2]


# ---------------------------------------------------------------------------
# Canonical JSON
# ---------------------------------------------------------------------------

def test_canonical_json_sorted_and_stable():
    obj = {"b": [1.0 / 3.0, 2], "a": {"z": np.float64(0.1), "y": None}}
    a = canonical_json(obj)
    b = canonical_json({"a": {"y": None, "z": 0.1}, "b": [1.0 / 3.0, 2]})
    assert a == b
    assert a.index('"a"') < a.index('"b"')


def test_canonical_json_17_digits():
    text = canonical_json({"v": 1.0 / 3.0})
    assert "0.33333333333333331" in text
