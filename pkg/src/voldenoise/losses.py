"""Training losses on (B, 1, D, H, W) Tensors; all use mean reduction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd.layers import conv3d
from .autograd.tensor import (Tensor, as_tensor, crop_border, forward_diff, mean_all, pad_reflect,
                              smooth_abs, sqrt, square, sum_channels)
from .filters import EDGE_EPS, edge_kernels

TERMS = ("rec", "guide", "edge", "tv")


@dataclass(frozen=True)
class LossWeights:
    rec: float = 0.8
    guide: float = 0.5
    edge: float = 0.05
    tv: float = 0.01

    def __post_init__(self):
        for name in TERMS:
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in TERMS}


def _mse(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return mean_all(square(a - b))


def loss_rec(pred: Tensor, noisy) -> Tensor:
    return _mse(pred, noisy)


def loss_guide(pred: Tensor, gaussian_target) -> Tensor:
    return _mse(pred, gaussian_target)


def edge_map(x: Tensor) -> Tensor:
    """Differentiable edge magnitude, identical to filters.edge_enhancer per sample."""
    x = as_tensor(x)
    k = edge_kernels()[:, None].astype(x.dtype)
    r = crop_border(conv3d(pad_reflect(x, 1), Tensor(k)), 1)
    return sqrt(sum_channels(square(r)) + EDGE_EPS ** 2) - EDGE_EPS


def loss_edge(pred: Tensor, bilateral_target) -> Tensor:
    target = edge_map(Tensor(np.asarray(getattr(bilateral_target, "data", bilateral_target),
                                        dtype=as_tensor(pred).dtype)))
    return _mse(edge_map(pred), target.data)


def loss_tv(pred: Tensor, eps: float = 1e-6) -> Tensor:
    """Sum over the three axes of the mean smoothed |forward difference|."""
    pred = as_tensor(pred)
    total = None
    for axis in (2, 3, 4):
        if pred.shape[axis] < 2:
            continue
        term = mean_all(smooth_abs(forward_diff(pred, axis), eps))
        total = term if total is None else total + term
    return total if total is not None else Tensor(np.zeros((), dtype=pred.dtype))


def loss_terms(pred: Tensor, noisy, gaussian_target, bilateral_target,
               weights: LossWeights | None = None) -> dict[str, Tensor]:
    """The four terms; terms with zero weight are skipped (returned as None)."""
    w = weights or LossWeights()
    fns = {
        "rec": lambda: loss_rec(pred, noisy),
        "guide": lambda: loss_guide(pred, gaussian_target),
        "edge": lambda: loss_edge(pred, bilateral_target),
        "tv": lambda: loss_tv(pred),
    }
    return {name: fns[name]() if getattr(w, name) > 0 else None for name in TERMS}


def combine(terms: dict[str, Tensor | None], weights: LossWeights) -> Tensor:
    total = None
    for name in TERMS:
        t = terms.get(name)
        if t is None or getattr(weights, name) == 0:
            continue
        part = t * float(getattr(weights, name))
        total = part if total is None else total + part
    if total is None:
        return Tensor(np.zeros(()))
    return total


def loss_total(pred: Tensor, noisy, gaussian_target, bilateral_target,
               weights: LossWeights | None = None) -> Tensor:
    w = weights or LossWeights()
    return combine(loss_terms(pred, noisy, gaussian_target, bilateral_target, w), w)
