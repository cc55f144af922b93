"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps gradients that vanish by symmetry (e.g. attention key
    biases, which softmax cancels) from turning round-off into a 100% error.
    With the usual 1e-4 threshold such gradients are held to 1e-10 absolute,
    about the resolution of central differences at h=1e-5 in double precision.
    """
    diff = float(np.linalg.norm((analytic - numeric).ravel()))
    scale = max(float(np.linalg.norm(analytic.ravel())), float(np.linalg.norm(numeric.ravel())), floor)
    return diff / scale


def numeric_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5,
                 coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """d fn() / d leaf by central differences at flat ``coords`` (default: all)."""
    leaf.data = np.ascontiguousarray(leaf.data)
    flat = leaf.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx))
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        out[j] = (fp - fm) / (2 * h)
    return out


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5,
                    max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> dict:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    Returns ``{leaf_index: relative_error}``. With ``max_coords`` set, each leaf
    is checked on a random subset of that many entries.
    """
    for leaf in leaves:
        leaf.grad = None
    backward(fn(), inputs=leaves)
    rng = rng or np.random.default_rng(0)
    errors = {}
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad.reshape(-1)
        coords = None
        if max_coords is not None and leaf.size > max_coords:
            coords = np.sort(rng.choice(leaf.size, size=max_coords, replace=False))
        numeric = numeric_grad(fn, leaf, h=h, coords=coords)
        a = analytic if coords is None else analytic[coords]
        errors[k] = relative_error(a, numeric)
    return errors
