import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prognosis.metrics import (
    MISSING,
    EmptyInputError,
    accuracy,
    average_precision,
    balanced_accuracy,
    ece,
    f1_binary,
    mse_ordinal,
    multiclass_ece,
    predicted_classes,
    roc_auc,
)


def auc_pairs(scores, labels):
    """Mann-Whitney statistic by looping over every positive/negative pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def ap_thresholds(scores, labels):
    """Step-wise AP by re-thresholding at every distinct score, highest first."""
    n_pos = sum(1 for y in labels if y == 1)
    total, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        hits = [y for s, y in zip(scores, labels) if s >= t]
        tp = sum(1 for y in hits if y == 1)
        recall = tp / n_pos
        total += (recall - prev_recall) * (tp / len(hits))
        prev_recall = recall
    return total


def random_binary(r):
    n = int(r.integers(2, 65))
    y = r.integers(0, 2, n)
    y[0], y[1] = 0, 1
    r.shuffle(y)
    # coarse grid for ties half the time
    s = r.integers(0, 6, n) / 5.0 if r.random() < 0.5 else r.random(n)
    return s, y


# fixtures from hand computation

def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 1, 1], [0, 0, 1]) == 0.75
    assert balanced_accuracy([2, 0, 1], [2, 0, 1]) == 1.0
    assert balanced_accuracy([0] * 6, [0, 0, 1, 1, 2, 2]) == 1 / 3
    with pytest.raises(EmptyInputError):
        balanced_accuracy([1, 2], [MISSING, MISSING])


def test_mse_examples():
    assert mse_ordinal([[0, 0, 1, 0, 0]], [2]) == 0.0
    assert mse_ordinal([[0.2] * 5], [2]) == pytest.approx(0.0, abs=1e-15)
    assert mse_ordinal([[0.5, 0.5, 0, 0, 0]], [3]) == 6.25
    # argmax variant: lowest index wins the tie, so (0 - 3)^2
    assert mse_ordinal([[0.5, 0.5, 0, 0, 0]], [3], use_argmax=True) == 9.0
    with pytest.raises(EmptyInputError):
        mse_ordinal([[1.0, 0.0]], [MISSING])


def test_f1_examples():
    assert f1_binary([1, 1, 0], [1, 0, 1]) == 0.5
    assert f1_binary([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1_binary([0, 0, 0], [1, 0, 1]) == 0.0
    assert f1_binary([0, 0], [0, 0]) == 0.0


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.3] * 4, [0, 1, 0, 1]) == 0.5
    with pytest.raises(EmptyInputError):
        roc_auc([0.1, 0.2], [1, 1])


def test_ap_examples():
    assert average_precision([0.9, 0.5, 0.1], [1, 0, 1]) == 0.5 * 1 + 0.5 * (2 / 3)
    assert abs(average_precision([0.9, 0.5, 0.1], [1, 0, 1]) - 5 / 6) < 1e-15
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    with pytest.raises(EmptyInputError):
        average_precision([0.9, 0.1], [0, 0])


def test_ece_examples():
    assert ece([1.0, 1.0, 1.0], [1, 1, 1]) == 0.0
    # one bin: mean confidence 0.8 against accuracy 0.6; exact up to the rounding of 0.8 - 0.6
    assert ece([0.8] * 5, [1, 1, 1, 0, 0]) == pytest.approx(0.2, abs=1e-15)
    # calibrated by construction: in every bin accuracy equals the confidence
    conf, hit = [], []
    for c in (0.1, 0.3, 0.5, 0.7, 0.9):
        conf += [c] * 10
        hit += [1] * int(round(c * 10)) + [0] * (10 - int(round(c * 10)))
    assert ece(conf, hit) < 1e-12
    # 0.1 sits in the first bin (right-closed), 0.0 is folded into it too
    assert ece([0.0, 0.1], [0, 0]) == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(EmptyInputError):
        ece([], [])
    with pytest.raises(ValueError):
        ece([1.2], [1])


def test_argmax_ties_lowest_index():
    d = np.array([[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]])
    assert predicted_classes(d).tolist() == [0, 1]
    assert multiclass_ece(d, [0, 2]) == pytest.approx(0.5 * 0.6 + 0.5 * 0.45, abs=1e-15)


# brute-force oracles

def test_auc_ap_match_oracles_on_random_instances():
    r = np.random.default_rng(2024)
    worst_auc = worst_ap = 0.0
    for _ in range(1000):
        s, y = random_binary(r)
        worst_auc = max(worst_auc, abs(roc_auc(s, y) - auc_pairs(s, y)))
        worst_ap = max(worst_ap, abs(average_precision(s, y) - ap_thresholds(s, y)))
    assert worst_auc < 1e-12 and worst_ap < 1e-12


# properties

@given(st.integers(0, 2**31 - 1))
def test_metrics_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    s, y = random_binary(r)
    d = r.dirichlet(np.ones(4), size=s.size)
    c = r.integers(0, 4, s.size)
    p = r.permutation(s.size)
    pairs = [
        (roc_auc, s, y), (average_precision, s, y), (f1_binary, (s > 0.5).astype(int), y),
        (balanced_accuracy, predicted_classes(d), c), (accuracy, predicted_classes(d), c),
        (mse_ordinal, d, c), (multiclass_ece, d, c),
    ]
    for fn, a, b in pairs:
        assert abs(fn(a, b) - fn(a[p], b[p])) < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_auc_antisymmetry(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 65))
    y = r.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = r.permutation(n) / n  # tie-free
    assert abs(roc_auc(s, y) - (1 - roc_auc(-s, y))) < 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(2, 4))
def test_ba_invariant_to_class_duplication(seed, times):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 40))
    labels = r.integers(0, 3, n)
    preds = r.integers(0, 3, n)
    cls = labels[0]
    sel = labels == cls
    more_l = np.concatenate([labels] + [labels[sel]] * (times - 1))
    more_p = np.concatenate([preds] + [preds[sel]] * (times - 1))
    assert abs(balanced_accuracy(preds, labels) - balanced_accuracy(more_p, more_l)) < 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(1, 10))
def test_missing_labels_change_nothing(seed, n_extra):
    r = np.random.default_rng(seed)
    s, y = random_binary(r)
    d = r.dirichlet(np.ones(4), size=s.size)
    c = r.integers(0, 4, s.size)
    es, ed = r.random(n_extra) * 10, r.dirichlet(np.ones(4), size=n_extra)
    miss = np.full(n_extra, MISSING)
    cat = np.concatenate
    assert roc_auc(cat([s, es]), cat([y, miss])) == roc_auc(s, y)
    assert average_precision(cat([s, es]), cat([y, miss])) == average_precision(s, y)
    assert f1_binary(cat([y, 1 - miss]), cat([y, miss])) == f1_binary(y, y)
    assert balanced_accuracy(cat([c, r.integers(0, 4, n_extra)]), cat([c, miss])) == balanced_accuracy(c, c)
    assert mse_ordinal(cat([d, ed]), cat([c, miss])) == mse_ordinal(d, c)
    assert multiclass_ece(cat([d, ed]), cat([c, miss])) == multiclass_ece(d, c)
    assert accuracy(cat([c, r.integers(0, 4, n_extra)]), cat([c, miss])) == accuracy(c, c)
