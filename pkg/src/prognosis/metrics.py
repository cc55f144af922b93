"""Classification, ranking and calibration metrics.

All functions drop samples whose label is ``MISSING`` (-1) before computing.
Argmax ties resolve to the lowest class index (numpy's ``argmax`` rule).
"""
from __future__ import annotations

import numpy as np

MISSING = -1


class EmptyInputError(ValueError):
    pass


def _present(labels, *others):
    labels = np.asarray(labels)
    keep = labels != MISSING
    out = [labels[keep]]
    for o in others:
        out.append(np.asarray(o)[keep])
    return out


def predicted_classes(dists) -> np.ndarray:
    return np.argmax(np.asarray(dists), axis=-1)


def accuracy(preds, labels) -> float:
    labels, preds = _present(labels, preds)
    if labels.size == 0:
        raise EmptyInputError("accuracy: no labeled samples")
    return float(np.mean(preds == labels))


def balanced_accuracy(preds, labels) -> float:
    """Unweighted mean recall over the classes present in ``labels``."""
    labels, preds = _present(labels, preds)
    if labels.size == 0:
        raise EmptyInputError("balanced_accuracy: no labeled samples")
    recalls = [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def mse_ordinal(pred_dists, labels, use_argmax: bool = False) -> float:
    """Mean squared distance between the predicted class and the label.

    The predicted class is the expectation sum_c c*p(c) by default, or the
    argmax class with ``use_argmax``.
    """
    labels, dists = _present(labels, pred_dists)
    if labels.size == 0:
        raise EmptyInputError("mse_ordinal: no labeled samples")
    dists = np.asarray(dists, dtype=np.float64)
    if use_argmax:
        pred = np.argmax(dists, axis=1).astype(np.float64)
    else:
        pred = dists @ np.arange(dists.shape[1], dtype=np.float64)
    return float(np.mean((pred - labels) ** 2))


def f1_binary(preds, labels) -> float:
    labels, preds = _present(labels, preds)
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form: P(s+ > s-) + 0.5 P(s+ == s-), via average ranks."""
    labels, scores = _present(labels, scores)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise EmptyInputError("roc_auc: needs both positive and negative labels")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average 1-based rank within each group of tied scores
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    for s, c in zip(start, counts):
        ranks[order[s:s + c]] = s + (c + 1) / 2.0
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum over distinct descending thresholds of (R_n - R_{n-1}) * P_n."""
    labels, scores = _present(labels, scores)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise EmptyInputError("average_precision: no positive labels")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], (labels[order] == 1)
    tp = np.cumsum(y)
    # last index of each tie group marks a threshold
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp_at = tp[last].astype(np.float64)
    precision = tp_at / (last + 1)
    recall = tp_at / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def ece(confidences, correct, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width, right-closed bins on (0, 1].

    A confidence of exactly 0 is counted in the first bin.
    """
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.size == 0:
        raise EmptyInputError("ece: empty input")
    if conf.shape != hit.shape:
        raise ValueError(f"ece: {conf.size} confidences but {hit.size} correctness flags")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("ece: confidences must lie in [0, 1]")
    upper = np.linspace(0.0, 1.0, n_bins + 1)[1:]
    bins = np.minimum(np.searchsorted(upper, conf, side="left"), n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        sel = bins == b
        n = int(sel.sum())
        if n:
            total += n / conf.size * abs(hit[sel].mean() - conf[sel].mean())
    return float(total)


def multiclass_ece(dists, labels, n_bins: int = 10) -> float:
    labels, dists = _present(labels, dists)
    if labels.size == 0:
        raise EmptyInputError("ece: no labeled samples")
    dists = np.asarray(dists, dtype=np.float64)
    pred = np.argmax(dists, axis=1)
    conf = dists[np.arange(labels.size), pred]
    return ece(conf, pred == labels, n_bins)
