"""Dataset manifests: one CSV row per exam.

Columns, in order::

    image, center_id, subject_id, clin_0 .. clin_{M-1}, y0, y1 .. yK

``image`` is ``<archive>.pk8#<index>`` (an image inside a packed archive),
or a path to a ``.npy`` / ``.png`` file; relative paths resolve against the
manifest's directory. ``y*`` cells hold a class index, a raw grade token
(KL0..KL4, TKR) or ``NA`` for a missing label. Progression flags are derived
from the stage columns.
"""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .packed import CorpusError, read_packed, write_packed
from .records import MISSING, ExamRecord, derive_progression, grade_to_class, is_excluded

FIXED_COLUMNS = ("image", "center_id", "subject_id")


class ManifestError(ValueError):
    pass


def _stage_columns(header: Sequence[str]) -> list[str]:
    cols = [c for c in header if c.startswith("y") and c[1:].isdigit()]
    cols.sort(key=lambda c: int(c[1:]))
    if not cols or [int(c[1:]) for c in cols] != list(range(len(cols))):
        raise ManifestError(f"manifest needs stage columns y0..yK, found {cols}")
    return cols


def read_manifest(path, exclude_tkr_baseline: bool = True) -> tuple[list[ExamRecord], dict]:
    """Parse a manifest. Returns (records, report) where report counts missing labels."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in FIXED_COLUMNS[:2]:
            if col not in header:
                raise ManifestError(f"{path}: missing required column {col!r}")
        ycols = _stage_columns(header)
        ccols = sorted((c for c in header if c.startswith("clin_")), key=lambda c: int(c[5:]))
        records, excluded = [], 0
        for lineno, row in enumerate(reader, start=2):
            raw = [row[c] for c in ycols]
            if exclude_tkr_baseline and is_excluded(raw[0]):
                excluded += 1
                continue
            try:
                stages = np.array([grade_to_class(v) for v in raw], dtype=np.int64)
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            clinical = None
            if ccols:
                try:
                    clinical = np.array([float(row[c]) for c in ccols])
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: non-numeric clinical value") from None
            ref = row["image"]
            if not ref.startswith("/"):
                ref = str(path.parent / ref)
            records.append(ExamRecord(
                image=ref,
                center_id=row["center_id"],
                subject_id=row.get("subject_id") or f"row{lineno}",
                stage_labels=stages,
                progression_labels=derive_progression(stages),
                clinical=clinical,
            ))
    report = missingness_report(records)
    report["excluded_tkr_baseline"] = excluded
    return records, report


def missingness_report(records: Sequence[ExamRecord]) -> dict:
    if not records:
        return {"n_records": 0, "stage_missing": [], "progression_missing": [], "centers": {}}
    stages = np.stack([r.stage_labels for r in records])
    prog = np.stack([r.progression_labels for r in records])
    centers = defaultdict(int)
    for r in records:
        centers[r.center_id] += 1
    return {
        "n_records": len(records),
        "stage_missing": [int(v) for v in (stages == MISSING).sum(axis=0)],
        "progression_missing": [int(v) for v in (prog == MISSING).sum(axis=0)],
        "centers": dict(sorted(centers.items())),
    }


def write_manifest(records: Sequence[ExamRecord], path, archive_name: str = "images.pk8") -> None:
    """Write records (with in-memory uint8 images) as a manifest plus a packed archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = np.stack([np.asarray(r.image) for r in records]) if records else np.zeros((0, 1, 1), np.uint8)
    if images.dtype != np.uint8:
        raise ManifestError("write_manifest stores uint8 images only")
    write_packed(path.parent / archive_name, images)
    K = records[0].K if records else 0
    n_clin = 0 if not records or records[0].clinical is None else records[0].clinical.shape[0]
    header = list(FIXED_COLUMNS) + [f"clin_{j}" for j in range(n_clin)] + [f"y{k}" for k in range(K + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, r in enumerate(records):
            clin = [] if r.clinical is None else [repr(float(v)) for v in r.clinical]
            ys = ["NA" if s == MISSING else str(int(s)) for s in r.stage_labels]
            w.writerow([f"{archive_name}#{i}", r.center_id, r.subject_id, *clin, *ys])


class ImageLoader:
    """Resolves image references to float arrays in [0, 1], caching archives."""

    def __init__(self):
        self._archives: dict[str, np.ndarray] = {}

    def __call__(self, ref) -> np.ndarray:
        if isinstance(ref, np.ndarray):
            arr = ref
        else:
            ref = str(ref)
            if "#" in ref:
                archive, idx = ref.rsplit("#", 1)
                if archive not in self._archives:
                    self._archives[archive] = read_packed(archive)
                imgs = self._archives[archive]
                i = int(idx)
                if not 0 <= i < imgs.shape[0]:
                    raise CorpusError(f"{archive}: image index {i} out of range ({imgs.shape[0]} images)")
                arr = imgs[i]
            elif ref.endswith(".npy"):
                try:
                    arr = np.load(ref)
                except OSError as exc:
                    raise CorpusError(f"cannot read image {ref}: {exc}") from None
            else:
                from PIL import Image
                try:
                    with Image.open(ref) as im:
                        arr = np.asarray(im.convert("L"))
                except OSError as exc:
                    raise CorpusError(f"cannot read image {ref}: {exc}") from None
        if arr.dtype == np.uint8:
            return arr.astype(np.float64) / 255.0
        return np.asarray(arr, dtype=np.float64)


def pivot_visits(rows: Sequence[dict], horizon_months: Sequence[int], tolerance_months: int = 6,
                 image_month: int = 0) -> list[dict]:
    """Turn long-format visit rows into manifest rows.

    ``rows`` carry ``subject_id``, ``side``, ``center_id``, ``month``, ``grade``
    and (for the baseline visit) ``image``. Each visit is snapped to the
    nearest horizon month within ``tolerance_months`` (e.g. a 15-month visit to
    12, a 30-month one to 36); unmatched horizons become NA. The first entry of ``horizon_months`` is
    the baseline.
    """
    by_knee = defaultdict(list)
    for r in rows:
        by_knee[(r["subject_id"], r.get("side", ""))].append(r)
    out = []
    for (subject, side), visits in sorted(by_knee.items()):
        cells = ["NA"] * len(horizon_months)
        image, center = None, visits[0]["center_id"]
        for v in sorted(visits, key=lambda v: float(v["month"])):
            m = float(v["month"])
            dist = [abs(m - h) for h in horizon_months]
            # ties go to the later mark (a 30-month visit counts as 36)
            j = max(range(len(dist)), key=lambda i: (-dist[i], i))
            if dist[j] <= tolerance_months and cells[j] == "NA":
                cells[j] = v["grade"]
            if abs(m - image_month) <= tolerance_months and v.get("image"):
                image = image or v["image"]
        if image is None:
            continue
        row = {"image": image, "center_id": center, "subject_id": subject}
        row.update({f"y{k}": c for k, c in enumerate(cells)})
        out.append(row)
    return out
