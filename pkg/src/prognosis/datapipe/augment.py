"""Training-time augmentation applied in a fixed order.

Default plan (sizes are ratios so one plan serves 256-px radiographs and
28-px synthetic images alike):

    centre crop   p=1    fraction 1.0 of the shorter side
    resize        p=1    280/256 of the output size
    gaussian noise p=0.5 sigma drawn from [0, 0.3]
    rotation      p=1    angle from [-10, 10] degrees
    random crop   p=1    output size
    gamma         p=0.5  gamma from [0.5, 1.5]

Intensities are floats in [0, 1] and are clipped after noise and gamma.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

GEOMETRIC_STEPS = ("center_crop", "resize")


class AugmentationError(ValueError):
    pass


@dataclass
class AugStep:
    name: str
    prob: float = 1.0
    params: dict = field(default_factory=dict)


def default_steps() -> list[AugStep]:
    return [
        AugStep("center_crop", 1.0, {"fraction": 1.0}),
        AugStep("resize", 1.0, {"ratio": 280 / 256}),
        AugStep("gaussian_noise", 0.5, {"sigma": 0.3}),
        AugStep("rotation", 1.0, {"degrees": [-10.0, 10.0]}),
        AugStep("random_crop", 1.0, {}),
        AugStep("gamma", 0.5, {"range": [0.5, 1.5]}),
    ]


@dataclass
class AugmentationPlan:
    output_size: int
    steps: list = field(default_factory=default_steps)

    def eval_plan(self) -> "AugmentationPlan":
        """Deterministic geometry only: centre crop, resize, then a centre crop to size."""
        steps = [s for s in self.steps if s.name in GEOMETRIC_STEPS]
        return AugmentationPlan(self.output_size, steps + [AugStep("center_crop_to_output", 1.0, {})])

    @classmethod
    def disabled(cls, output_size: int) -> "AugmentationPlan":
        return cls(output_size, [])


def _crop(img: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    return img[top:top + h, left:left + w]


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    H, W = img.shape
    if (H, W) == (h, w):
        return img
    ys = (np.arange(h) + 0.5) * (H / h) - 0.5
    xs = (np.arange(w) + 0.5) * (W / w) - 0.5
    grid = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, grid, order=1, mode="nearest")


def augment(image: np.ndarray, plan: AugmentationPlan, rng: np.random.Generator | None) -> np.ndarray:
    """Apply ``plan`` to a 2-d float image and return an output_size x output_size image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise AugmentationError(f"augment expects a 2-d image, got shape {img.shape}")
    S = plan.output_size
    if min(img.shape) < S:
        raise AugmentationError(f"image {img.shape[0]}x{img.shape[1]} is smaller than the crop size {S}")
    for step in plan.steps:
        if step.prob <= 0.0:
            continue
        if step.prob < 1.0:
            if rng is None:
                raise AugmentationError(f"step {step.name!r} is random but no rng was given")
            if rng.random() >= step.prob:
                continue
        name, p = step.name, step.params
        if name == "center_crop":
            side = int(round(min(img.shape) * p.get("fraction", 1.0)))
            if side < 1 or side > min(img.shape):
                raise AugmentationError(f"centre crop of {side} px does not fit {img.shape}")
            top, left = (img.shape[0] - side) // 2, (img.shape[1] - side) // 2
            img = _crop(img, top, left, side, side)
        elif name == "resize":
            side = max(S, int(round(S * p.get("ratio", 1.0))))
            img = _resize(img, side, side)
        elif name == "gaussian_noise":
            sigma = rng.uniform(0.0, p.get("sigma", 0.3))
            img = np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)
        elif name == "rotation":
            lo, hi = p.get("degrees", (-10.0, 10.0))
            angle = rng.uniform(lo, hi) if hi > lo else float(lo)
            if angle != 0.0:
                img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        elif name == "random_crop":
            H, W = img.shape
            if H < S or W < S:
                raise AugmentationError(f"image {H}x{W} is smaller than the crop size {S}")
            if p.get("centered", False) or rng is None:
                top, left = (H - S) // 2, (W - S) // 2
            else:
                top, left = int(rng.integers(H - S + 1)), int(rng.integers(W - S + 1))
            img = _crop(img, top, left, S, S)
        elif name == "center_crop_to_output":
            H, W = img.shape
            img = _crop(img, (H - S) // 2, (W - S) // 2, S, S)
        elif name == "gamma":
            lo, hi = p.get("range", (0.5, 1.5))
            gamma = rng.uniform(lo, hi) if hi > lo else float(lo)
            img = np.clip(img, 0.0, 1.0) ** gamma
        else:
            raise AugmentationError(f"unknown augmentation step {name!r}")
    if img.shape != (S, S):
        img = _resize(img, S, S)
    return img
