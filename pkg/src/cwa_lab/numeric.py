"""Vector primitives shared by the attacks and the analysis code.

Every function accepts a single vector of shape ``(D,)`` or a batch of
vectors of shape ``(B, D)``; norms and reductions always run over the last
axis so that a batch behaves like ``B`` independent vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORM_FLOOR = 1e-12


class DimensionMismatch(ValueError):
    pass


def as_vec(v, name: str = "v") -> np.ndarray:
    """Return ``v`` as a float64 array, rejecting NaN/Inf."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError(f"{name} must be at least one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_image(x, lo: float = 0.0, hi: float = 1.0, name: str = "x") -> np.ndarray:
    arr = as_vec(x, name)
    if np.any(arr < lo) or np.any(arr > hi):
        raise ValueError(f"{name} has entries outside the pixel box [{lo}, {hi}]")
    return arr


@dataclass(frozen=True)
class PerturbationBudget:
    eps: float
    box_lo: float = 0.0
    box_hi: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.eps) or self.eps < 0:
            raise ValueError(f"eps must be finite and non-negative, got {self.eps}")
        if not self.box_lo < self.box_hi:
            raise ValueError("box_lo must be smaller than box_hi")


def clip_linf_box(x, x_nat, budget: PerturbationBudget) -> np.ndarray:
    """Project ``x`` onto the intersection of the eps-ball around ``x_nat`` and the box.

    Both constraint sets are coordinate-wise intervals, so the projection is a
    single clamp to ``[max(x_nat - eps, lo), min(x_nat + eps, hi)]``.
    """
    x = as_vec(x, "x")
    x_nat = as_vec(x_nat, "x_nat")
    if x.shape[-1] != x_nat.shape[-1]:
        raise DimensionMismatch(f"x has dim {x.shape[-1]}, x_nat has dim {x_nat.shape[-1]}")
    lower = np.maximum(x_nat - budget.eps, budget.box_lo)
    upper = np.minimum(x_nat + budget.eps, budget.box_hi)
    return np.minimum(np.maximum(x, lower), upper)


def sign_vec(v) -> np.ndarray:
    # np.sign maps 0 -> 0, which is the convention we want
    return np.sign(as_vec(v))


def _normalize(v, norm: np.ndarray, floor: float) -> np.ndarray:
    if not floor > 0:
        raise ValueError("floor must be positive")
    return v / np.maximum(norm, floor)


def l2_normalize(v, floor: float = NORM_FLOOR) -> np.ndarray:
    v = as_vec(v)
    return _normalize(v, np.linalg.norm(v, axis=-1, keepdims=True), floor)


def l1_normalize(v, floor: float = NORM_FLOOR) -> np.ndarray:
    v = as_vec(v)
    return _normalize(v, np.sum(np.abs(v), axis=-1, keepdims=True), floor)


def cosine_similarity(a, b, floor: float = NORM_FLOOR):
    """Cosine of the angle between ``a`` and ``b`` (row-wise for batches).

    A vector whose l2 norm falls below ``floor`` has no direction; its cosine
    with anything is reported as 0.
    """
    a = as_vec(a, "a")
    b = as_vec(b, "b")
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"dims differ: {a.shape[-1]} vs {b.shape[-1]}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    dot = np.sum(a * b, axis=-1)
    ok = (na >= floor) & (nb >= floor)
    cos = np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    return float(cos) if cos.ndim == 0 else cos


def mean_pairwise_cosine(grads) -> np.ndarray:
    """Mean cosine over member pairs; ``grads`` has the member axis first."""
    n = len(grads)
    if n < 2:
        return np.ones(np.shape(grads)[1:-1])
    vals = [cosine_similarity(grads[i], grads[j]) for i in range(n) for j in range(i + 1, n)]
    return np.mean(vals, axis=0)


def linf_distance(a, b) -> np.ndarray:
    return np.max(np.abs(np.asarray(a) - np.asarray(b)), axis=-1)
