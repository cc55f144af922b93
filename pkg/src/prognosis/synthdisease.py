"""Synthetic "rotation disease": a Markov chain over stages rendered as image rotations.

Stage m is shown by rotating an aligned image by m * pi/4 about its centre.
The default chain advances one stage with probability p and otherwise stays;
the last stage is absorbing. Because the chain is known, the best achievable
accuracy at every horizon follows from matrix powers (:func:`bayes_oracle`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .datapipe.records import ExamRecord, MISSING, derive_progression

N_STAGES = 9
N_HORIZONS = 4


@dataclass
class DiseaseChain:
    T: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.T, dtype=np.float64)
        if T.ndim != 2 or T.shape[0] != T.shape[1]:
            raise ValueError(f"transition matrix must be square, got {T.shape}")
        if np.any(T < 0):
            raise ValueError("transition probabilities must be nonnegative")
        if not np.allclose(T.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("transition matrix rows must sum to 1")
        if T[-1, -1] != 1.0:
            raise ValueError("last stage must be absorbing")
        self.T = T

    @property
    def n_stages(self) -> int:
        return self.T.shape[0]

    def power(self, k: int) -> np.ndarray:
        return np.linalg.matrix_power(self.T, k)


def make_chain(p_advance: float, n_stages: int = N_STAGES) -> DiseaseChain:
    if not 0.0 < p_advance <= 1.0:
        raise ValueError(f"advance probability must be in (0, 1], got {p_advance}")
    if n_stages < 2:
        raise ValueError("a chain needs at least 2 stages")
    T = np.zeros((n_stages, n_stages))
    for m in range(n_stages - 1):
        T[m, m] = 1.0 - p_advance
        T[m, m + 1] = p_advance
    T[-1, -1] = 1.0
    return DiseaseChain(T)


def sample_trajectory(chain: DiseaseChain, m0: int, K: int, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= m0 < chain.n_stages:
        raise ValueError(f"stage {m0} outside 0..{chain.n_stages - 1}")
    cdf = np.cumsum(chain.T, axis=1)
    out = np.empty(K, dtype=np.int64)
    m = m0
    for k in range(K):
        u = rng.random()
        m = int(min(np.searchsorted(cdf[m], u, side="right"), chain.n_stages - 1))
        out[k] = m
    return out


def render_stage(image: np.ndarray, stage: int) -> np.ndarray:
    """Rotate a square image counter-clockwise by ``stage * pi/4`` about its centre.

    Multiples of pi/2 use exact index rotation; other angles use bilinear
    resampling with zero fill outside the source.
    """
    img = np.asarray(image)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ValueError(f"render_stage needs a square 2-d image, got shape {img.shape}")
    if stage % 2 == 0:
        return np.rot90(img, (stage // 2) % 4).copy()
    src = img.astype(np.float64)
    return ndimage.rotate(src, 45.0 * stage, reshape=False, order=1, mode="constant", cval=0.0)


def uniform_baseline(n_stages: int, stages: Optional[Sequence[int]] = None) -> np.ndarray:
    """Uniform distribution over the allowed baseline stages."""
    dist = np.zeros(n_stages)
    stages = range(n_stages) if stages is None else stages
    dist[list(stages)] = 1.0
    return dist / dist.sum()


def bayes_oracle(chain: DiseaseChain, k: int, baseline_dist: Optional[np.ndarray] = None) -> dict:
    """Best prediction of the stage k steps ahead when the current stage is known.

    Returns ``{"prediction": [n_stages], "accuracy_by_stage": [n_stages],
    "accuracy": float}`` where the overall accuracy averages the per-stage
    optimum over ``baseline_dist`` (uniform over all stages by default).
    """
    if k < 1:
        raise ValueError(f"horizon must be >= 1, got {k}")
    Tk = chain.power(k)
    pred = np.argmax(Tk, axis=1)
    acc = Tk.max(axis=1)
    dist = uniform_baseline(chain.n_stages) if baseline_dist is None else np.asarray(baseline_dist, float)
    return {"prediction": pred, "accuracy_by_stage": acc, "accuracy": math.fsum(dist * acc)}


def procedural_corpus(n: int, size: int = 28, seed: int = 0) -> np.ndarray:
    """Aligned uint8 images sharing a canonical orientation.

    Each image has a top-to-bottom intensity ramp inside a disc, a vertical
    bar on the left and a blob in the upper right, with per-image jitter in
    position, size, contrast and noise. The layout has no rotational symmetry,
    so all eight pi/4 rotations are distinguishable.
    """
    rng = np.random.default_rng(seed)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r_disc = 0.46 * size
    out = np.empty((n, size, size), dtype=np.uint8)
    s = size / 28.0
    for i in range(n):
        dy, dx = rng.uniform(-1.0, 1.0, size=2) * s
        y, x = yy - dy, xx - dx
        disc = ((y - c) ** 2 + (x - c) ** 2) <= r_disc ** 2
        ramp = rng.uniform(0.25, 0.45) + rng.uniform(0.25, 0.4) * (1.0 - y / (size - 1))
        img = np.where(disc, ramp, 0.0)
        bar_x = c - rng.uniform(5.0, 7.0) * s
        bar_half = rng.uniform(5.0, 8.0) * s
        bar = (np.abs(x - bar_x) <= 1.2 * s) & (np.abs(y - c - 1.0 * s) <= bar_half)
        img = np.where(bar, rng.uniform(0.85, 1.0), img)
        by, bx = c - rng.uniform(4.0, 6.5) * s, c + rng.uniform(4.0, 6.5) * s
        blob = np.exp(-((y - by) ** 2 + (x - bx) ** 2) / (2 * (rng.uniform(1.5, 2.5) * s) ** 2))
        img = img + rng.uniform(0.35, 0.6) * blob * disc
        img = img + rng.normal(0.0, 0.03, size=img.shape) * disc
        out[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return out


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def build_dataset(corpus: np.ndarray, chain: DiseaseChain, n_samples: int, seed: int = 0,
                  K: int = N_HORIZONS, mask_fraction: float = 0.0,
                  baseline_stages: Optional[Sequence[int]] = None,
                  n_centers: int = 1, knees_per_subject: int = 1) -> list[ExamRecord]:
    """Draw ``n_samples`` synthetic exams.

    Each sample picks a corpus image and a baseline stage uniformly (over
    ``baseline_stages``, default every stage except the last, whose rotation
    2*pi coincides with stage 0), samples K further stages from the chain,
    and renders the rotated baseline image as uint8. With ``mask_fraction``
    each horizon stage label is independently set MISSING; progression flags
    are derived from the surviving labels. Sample i uses its own RNG stream
    derived from (seed, i).
    """
    corpus = np.asarray(corpus)
    if corpus.ndim != 3 or corpus.shape[0] == 0:
        raise ValueError("corpus must be a nonempty [count, height, width] array")
    if not 0.0 <= mask_fraction < 1.0:
        raise ValueError(f"mask fraction must be in [0, 1), got {mask_fraction}")
    if baseline_stages is None:
        baseline_stages = default_baseline_stages(chain.n_stages)
    baseline_stages = np.asarray(list(baseline_stages), dtype=np.int64)
    records = []
    for i in range(n_samples):
        rng = _sample_rng(seed, i)
        src = int(rng.integers(corpus.shape[0]))
        m0 = int(baseline_stages[rng.integers(baseline_stages.size)])
        traj = sample_trajectory(chain, m0, K, rng)
        stages = np.concatenate([[m0], traj])
        if mask_fraction > 0:
            drop = rng.random(K) < mask_fraction
            stages[1:][drop] = MISSING
        rendered = render_stage(corpus[src].astype(np.float64), m0)
        image = np.clip(np.round(rendered), 0, 255).astype(np.uint8)
        subject = i // knees_per_subject
        records.append(ExamRecord(
            image=image,
            center_id=f"C{subject % n_centers}" if n_centers > 1 else "C0",
            subject_id=f"S{subject:06d}",
            stage_labels=stages,
            progression_labels=derive_progression(stages),
            meta={"source_index": src, "true_trajectory": [m0, *traj.tolist()]},
        ))
    return records


def default_baseline_stages(n_stages: int) -> list[int]:
    # stage 8 is a full turn and renders identically to stage 0
    return list(range(min(n_stages, 8)))


def rotation_angle(stage: int) -> float:
    return stage * math.pi / 4.0
