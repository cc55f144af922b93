"""Records, label derivation, augmentation, manifests and CV splits."""
from .augment import AugmentationError, AugmentationPlan, AugStep, augment, default_steps
from .manifest import ImageLoader, ManifestError, missingness_report, pivot_visits, read_manifest, write_manifest
from .packed import CorpusError, load_corpus, read_packed, write_packed
from .records import (
    GRADE_CLASSES,
    MISSING,
    ExamRecord,
    UnknownGradeError,
    derive_labels,
    derive_progression,
    grade_to_class,
    is_excluded,
)
from .splits import Fold, SplitError, split_holdout, split_kfold, split_one_center_out

__all__ = [
    "AugStep", "AugmentationError", "AugmentationPlan", "CorpusError", "ExamRecord", "Fold",
    "GRADE_CLASSES", "ImageLoader", "MISSING", "ManifestError", "SplitError", "UnknownGradeError",
    "augment", "default_steps", "derive_labels", "derive_progression", "grade_to_class",
    "is_excluded", "load_corpus", "missingness_report", "pivot_visits", "read_manifest",
    "read_packed", "split_holdout", "split_kfold", "split_one_center_out", "write_manifest",
    "write_packed",
]
