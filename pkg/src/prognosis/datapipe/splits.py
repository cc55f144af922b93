"""Cross-validation splitters over exam records.

Splits work on record indices. Records sharing a ``subject_id`` (e.g. the two
knees of one person) always land on the same side of a split.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np


class SplitError(ValueError):
    pass


@dataclass
class Fold:
    train: np.ndarray
    test: np.ndarray
    name: str = ""


def split_one_center_out(records) -> list[Fold]:
    """One fold per acquisition center; that center is the test set."""
    centers = sorted({r.center_id for r in records})
    if len(centers) < 2:
        raise SplitError(f"one-center-out needs at least 2 centers, found {centers}")
    ids = np.array([r.center_id for r in records])
    folds = []
    for c in centers:
        test = np.flatnonzero(ids == c)
        train = np.flatnonzero(ids != c)
        folds.append(Fold(train, test, name=str(c)))
    return folds


def _subject_groups(records, indices):
    groups = defaultdict(list)
    for i in indices:
        groups[records[i].subject_id].append(int(i))
    return groups


def split_kfold(records, k: int = 3, seed: int = 0, indices=None) -> list[Fold]:
    """Subject-grouped k-fold, stratified by baseline stage.

    Subjects are grouped by the baseline stage of their first record, shuffled,
    and dealt one at a time to the fold currently holding the fewest records of
    that stage (ties: fewest records overall, then lowest fold index). With
    one record per subject every fold's per-stage count is within one of the
    others. ``Fold.test`` is the validation part.
    """
    if k < 2:
        raise SplitError(f"k must be >= 2, got {k}")
    indices = np.arange(len(records)) if indices is None else np.asarray(indices)
    if indices.size < k:
        raise SplitError(f"cannot make {k} folds from {indices.size} records")
    groups = _subject_groups(records, indices)
    if len(groups) < k:
        raise SplitError(f"cannot make {k} folds from {len(groups)} subjects")
    strata = defaultdict(list)
    for subject in sorted(groups):
        strata[int(records[groups[subject][0]].stage_labels[0])].append(subject)
    rng = np.random.default_rng(seed)
    members = [[] for _ in range(k)]
    per_stratum = np.zeros(k, dtype=int)
    sizes = np.zeros(k, dtype=int)
    for stage in sorted(strata):
        subjects = strata[stage]
        order = rng.permutation(len(subjects))
        per_stratum[:] = 0
        for j in order:
            g = groups[subjects[j]]
            f = min(range(k), key=lambda i: (per_stratum[i], sizes[i], i))
            members[f].extend(g)
            per_stratum[f] += len(g)
            sizes[f] += len(g)
    folds = []
    all_idx = set(int(i) for i in indices)
    for f in range(k):
        valid = np.array(sorted(members[f]), dtype=np.int64)
        train = np.array(sorted(all_idx - set(members[f])), dtype=np.int64)
        folds.append(Fold(train, valid, name=f"fold{f}"))
    return folds


def split_holdout(records, valid_fraction: float = 0.2, seed: int = 0, indices=None) -> Fold:
    """Single grouped, stratified train/valid split (one fold of round(1/fraction))."""
    if not 0.0 < valid_fraction < 1.0:
        raise SplitError(f"valid fraction must be in (0, 1), got {valid_fraction}")
    k = max(2, int(round(1.0 / valid_fraction)))
    return split_kfold(records, k=k, seed=seed, indices=indices)[0]
