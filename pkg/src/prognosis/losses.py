"""Indicator-masked multi-task objective.

Labels use ``MISSING = -1``. Each task term is the mean cross-entropy over
the samples that carry a label for it; a term with no labeled samples
contributes exactly zero and is reported with ``count == 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Tensor, ops
from .model import PrognosisOutput

MISSING = -1


@dataclass
class LabelMask:
    """Per-sample labels; ``MISSING`` marks an absent target.

    baseline: [B] current stage; stages: [B, K] stage at horizons 1..K;
    progression: [B, K] 0/1 "progressed within k".
    """

    baseline: np.ndarray
    stages: np.ndarray
    progression: np.ndarray

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=np.int64).reshape(-1)
        self.stages = np.asarray(self.stages, dtype=np.int64)
        self.progression = np.asarray(self.progression, dtype=np.int64)
        B = self.baseline.shape[0]
        if self.stages.ndim != 2 or self.stages.shape[0] != B or self.progression.shape != self.stages.shape:
            raise ValueError(f"label shapes disagree: baseline {self.baseline.shape}, "
                             f"stages {self.stages.shape}, progression {self.progression.shape}")
        bad = (self.progression != MISSING) & ((self.progression < 0) | (self.progression > 1))
        if bad.any():
            raise ValueError("progression labels must be 0, 1 or MISSING")

    @property
    def K(self) -> int:
        return self.stages.shape[1]

    def subset(self, idx) -> "LabelMask":
        return LabelMask(self.baseline[idx], self.stages[idx], self.progression[idx])


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        ws = (self.w1, self.w2, self.w3)
        if any(w < 0 for w in ws) or not any(w > 0 for w in ws):
            raise ValueError(f"loss weights must be nonnegative with at least one positive, got {ws}")


@dataclass
class MaskedTerm:
    value: Tensor
    count: int

    @property
    def empty(self) -> bool:
        return self.count == 0


def masked_ce(logits: Tensor, labels, mask=None) -> MaskedTerm:
    """Mean cross-entropy over rows whose label is present.

    ``mask`` defaults to ``labels != MISSING``. Masked rows are never read, so
    their logits cannot influence the value or the gradient.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if mask is None:
        mask = labels != MISSING
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape != labels.shape or logits.shape[0] != labels.shape[0]:
        raise ValueError(f"logits {logits.shape}, labels {labels.shape} and mask {mask.shape} are not aligned")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return MaskedTerm(Tensor(np.zeros((), dtype=logits.dtype)), 0)
    return MaskedTerm(ops.cross_entropy(logits[idx], labels[idx]), int(idx.size))


@dataclass
class LossTerms:
    diag: MaskedTerm
    prognosis: list = field(default_factory=list)
    progression: list = field(default_factory=list)

    def all_terms(self) -> list[MaskedTerm]:
        return [self.diag, *self.prognosis, *self.progression]


def loss_terms(output: PrognosisOutput, labels: LabelMask) -> LossTerms:
    K = output.horizon_logits.shape[1]
    if labels.K != K:
        raise ValueError(f"output has {K} horizons but labels have {labels.K}")
    nc = output.diag_logits.shape[1]
    terms = LossTerms(masked_ce(output.diag_logits, labels.baseline))
    for k in range(K):
        terms.prognosis.append(masked_ce(output.horizon_logits[:, k, :nc], labels.stages[:, k]))
        terms.progression.append(masked_ce(output.horizon_logits[:, k, nc:], labels.progression[:, k]))
    return terms


def _weighted_sum(parts: list[tuple[float, MaskedTerm]], dtype) -> Tensor:
    total = None
    for w, term in parts:
        if term.empty or w == 0.0:
            continue
        t = ops.scale(term.value, w)
        total = t if total is None else ops.add(total, t)
    return total if total is not None else Tensor(np.zeros((), dtype=dtype))


def combine(terms: LossTerms, weights: LossWeights, K: int, dtype=np.float64) -> Tensor:
    parts = [(weights.w1, terms.diag)]
    parts += [(weights.w2 / K, t) for t in terms.prognosis]
    parts += [(weights.w3 / K, t) for t in terms.progression]
    return _weighted_sum(parts, dtype)


def total_loss(output: PrognosisOutput, labels: LabelMask, weights: LossWeights | None = None) -> Tensor:
    """w1*L0 + (w2/K)*sum_k prognosis_k + (w3/K)*sum_k progression_k."""
    weights = weights or LossWeights()
    terms = loss_terms(output, labels)
    return combine(terms, weights, output.horizon_logits.shape[1], output.diag_logits.dtype)


@dataclass
class MtlParams:
    """Learnable log-sigma per task term."""

    log_sigma: Tensor

    @classmethod
    def create(cls, n_tasks: int, dtype=np.float64) -> "MtlParams":
        return cls(Tensor(np.zeros(n_tasks, dtype=dtype), requires_grad=True))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma.data)


def mtl_loss(per_task_ce: list, params: MtlParams) -> Tensor:
    """sum_k exp(-2 log_sigma_k) * CE_k + log_sigma_k.

    Entries of ``per_task_ce`` may be ``None`` (no labeled samples); those
    tasks are skipped entirely, including their log-sigma term.
    """
    n = params.log_sigma.shape[0]
    if len(per_task_ce) != n:
        raise ValueError(f"{len(per_task_ce)} task losses but {n} sigma parameters")
    total = None
    for k, ce in enumerate(per_task_ce):
        if ce is None:
            continue
        ce = ce if isinstance(ce, Tensor) else Tensor(np.asarray(ce, dtype=params.log_sigma.dtype))
        s = params.log_sigma[k]
        term = ops.add(ops.mul(ops.exp(ops.scale(s, -2.0)), ce), s)
        total = term if total is None else ops.add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=params.log_sigma.dtype))
    return total


def total_mtl_loss(output: PrognosisOutput, labels: LabelMask, params: MtlParams) -> Tensor:
    terms = loss_terms(output, labels)
    return mtl_loss([None if t.empty else t.value for t in terms.all_terms()], params)
