"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, mul, sum_all


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_input: int
    worst_index: tuple

    def __str__(self):
        return (f"max relative error {self.max_rel_error:.3e} "
                f"(input {self.worst_input}, index {self.worst_index})")


def grad_check(fn, inputs, seed: int = 0, step: float = 1e-3, max_elements: int | None = None,
               wrt=None) -> GradCheckResult:
    """Compare analytic gradients of ``sum(r * fn(*inputs))`` with central
    differences, all in float64.

    ``fn`` takes and returns Tensors.  ``r`` is a fixed random projection so
    that every output element contributes.  ``max_elements`` caps the number
    of coordinates probed per input (sampled without replacement).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    sum_all(mul(out, Tensor(proj))).backward()

    def objective():
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * proj))

    worst = GradCheckResult(0.0, -1, ())
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        flat_idx = np.arange(arrays[i].size)
        if max_elements is not None and arrays[i].size > max_elements:
            flat_idx = rng.choice(arrays[i].size, size=max_elements, replace=False)
        numeric = np.empty(len(flat_idx))
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, arrays[i].shape)
            orig = arrays[i][idx]
            arrays[i][idx] = orig + step
            up = objective()
            arrays[i][idx] = orig - step
            down = objective()
            arrays[i][idx] = orig
            numeric[j] = (up - down) / (2 * step)
        ana = analytic.reshape(-1)[flat_idx]
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-12)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(numeric)), 1e-2 * scale)
        rel = np.abs(ana - numeric) / denom
        j = int(np.argmax(rel)) if rel.size else 0
        if rel.size and rel[j] > worst.max_rel_error:
            worst = GradCheckResult(float(rel[j]), i,
                                    tuple(int(t) for t in np.unravel_index(flat_idx[j], arrays[i].shape)))
    return worst
