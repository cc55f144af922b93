"""Exam records and label derivation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

MISSING = -1

# KL0 and KL1 are grouped; TKR is the terminal fifth class.
GRADE_CLASSES = {"KL0": 0, "KL1": 0, "KL2": 1, "KL3": 2, "KL4": 3, "TKR": 4}
MISSING_TOKENS = {"NA", "", "MISSING", "nan", "NaN"}


class UnknownGradeError(ValueError):
    pass


@dataclass
class ExamRecord:
    """One exam: baseline image, acquisition center, optional clinical vector, labels.

    ``stage_labels`` has K+1 entries (index 0 = baseline); ``progression_labels``
    has K entries for "progressed within k" (k = 1..K). ``MISSING`` = -1.
    ``image`` is either an array or a reference string resolved by the loader.
    """

    image: Union[np.ndarray, str]
    center_id: str
    stage_labels: np.ndarray
    progression_labels: np.ndarray
    subject_id: str = ""
    clinical: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stage_labels = np.asarray(self.stage_labels, dtype=np.int64)
        self.progression_labels = np.asarray(self.progression_labels, dtype=np.int64)
        if self.progression_labels.shape[0] != self.stage_labels.shape[0] - 1:
            raise ValueError(f"{self.stage_labels.shape[0]} stage labels need "
                             f"{self.stage_labels.shape[0] - 1} progression labels, "
                             f"got {self.progression_labels.shape[0]}")
        if self.clinical is not None:
            self.clinical = np.asarray(self.clinical, dtype=np.float64)
        if not self.subject_id:
            self.subject_id = f"{self.center_id}:{id(self)}"

    @property
    def K(self) -> int:
        return self.progression_labels.shape[0]

    @property
    def baseline(self) -> int:
        return int(self.stage_labels[0])


def grade_to_class(token) -> int:
    """Map a raw grade token (KL0..KL4, TKR, NA) or integer class to a class index."""
    if isinstance(token, (int, np.integer)):
        return int(token)
    tok = str(token).strip()
    if tok in MISSING_TOKENS:
        return MISSING
    if tok.upper() in GRADE_CLASSES:
        return GRADE_CLASSES[tok.upper()]
    if tok.lstrip("-").isdigit():
        return int(tok)
    raise UnknownGradeError(f"unknown grade token {token!r}; expected one of "
                            f"{sorted(GRADE_CLASSES)} or NA")


def derive_progression(stages: Sequence[int]) -> np.ndarray:
    """Progression flags for horizons 1..K from stage classes at 0..K.

    Within-k rule: 1 if the running maximum of the observed stages over
    years 1..k exceeds the baseline, 0 if some year in 1..k was observed and
    none exceeded it, MISSING if the baseline is missing or nothing in
    1..k was observed.
    """
    stages = np.asarray(stages, dtype=np.int64)
    K = stages.shape[0] - 1
    out = np.full(K, MISSING, dtype=np.int64)
    base = stages[0]
    if base == MISSING:
        return out
    running = MISSING
    for k in range(1, K + 1):
        if stages[k] != MISSING:
            running = max(running, int(stages[k]))
        if running != MISSING:
            out[k - 1] = int(running > base)
    return out


def derive_labels(raw_grades: Sequence) -> tuple[np.ndarray, np.ndarray]:
    """(stage_labels, progression_labels) from per-visit raw grades at baseline, 1..K."""
    stages = np.array([grade_to_class(g) for g in raw_grades], dtype=np.int64)
    return stages, derive_progression(stages)


def is_excluded(raw_baseline) -> bool:
    """Knees already replaced (TKR) at baseline are dropped at ingest."""
    return str(raw_baseline).strip().upper() == "TKR"
