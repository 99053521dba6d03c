"""Reverse-mode differentiation over dense numpy arrays.

Only the operations the denoising network and its losses need are provided;
there is no general broadcasting.  Every op records a closure that maps the
upstream gradient to gradients of its parents."""

from __future__ import annotations

import contextlib
import threading

import numpy as np

# per-thread, so concurrent inference threads cannot switch recording for each other
_state = threading.local()


@contextlib.contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient requires a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if node._parents:
                node.grad = None  # interior gradients are not retained
                node._backward = None

    # operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def make_result(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap ``data`` as the output of an op; the closure is kept only when
    some parent needs a gradient."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return make_result(a.data + b, (a,), lambda g: accumulate(a, g))
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_result(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: accumulate(a, -g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -b)
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        accumulate(a, g)
        accumulate(b, -g)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = b
        return make_result(a.data * s, (a,), lambda g: accumulate(a, g * s))
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        accumulate(a, g * b.data)
        accumulate(b, g * a.data)

    return make_result(a.data * b.data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    return make_result(a.data * a.data, (a,), lambda g: accumulate(a, 2.0 * g * a.data))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: accumulate(a, 0.5 * g / out))


def smooth_abs(a: Tensor, eps: float = 1e-6) -> Tensor:
    """sqrt(u^2 + eps^2): differentiable stand-in for |u|."""
    out = np.sqrt(a.data * a.data + eps * eps)
    return make_result(out, (a,), lambda g: accumulate(a, g * a.data / out))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return make_result(np.where(keep, a.data, 0), (a,), lambda g: accumulate(a, g * keep))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result(a.data * factor, (a,), lambda g: accumulate(a, g * factor))


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return make_result(np.asarray(a.data.sum(dtype=np.float64), dtype=dtype), (a,),
                       lambda g: accumulate(a, np.full(shape, g, dtype=dtype)))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape, dtype = a.shape, a.dtype
    return make_result(np.asarray(a.data.mean(dtype=np.float64), dtype=dtype), (a,),
                       lambda g: accumulate(a, np.full(shape, g / n, dtype=dtype)))


def sum_channels(a: Tensor) -> Tensor:
    """(B, C, ...) -> (B, 1, ...)"""
    shape = a.shape
    return make_result(a.data.sum(axis=1, keepdims=True), (a,),
                       lambda g: accumulate(a, np.broadcast_to(g, shape)))


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            accumulate(t, part)

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        accumulate(a, full)

    return make_result(a.data[:, start:stop].copy(), (a,), backward)


def pad_end(a: Tensor, target) -> Tensor:
    """Zero-pad the trailing end of the three spatial axes up to ``target``."""
    spatial = a.shape[2:]
    if tuple(target) == tuple(spatial):
        return a
    widths = [(0, 0), (0, 0)] + [(0, t - s) for s, t in zip(spatial, target)]
    sl = (slice(None), slice(None)) + tuple(slice(0, s) for s in spatial)
    return make_result(np.pad(a.data, widths), (a,), lambda g: accumulate(a, g[sl]))


def crop_start(a: Tensor, target) -> Tensor:
    """Keep the leading ``target`` voxels of each spatial axis."""
    if tuple(target) == tuple(a.shape[2:]):
        return a
    shape, dtype = a.shape, a.dtype
    sl = (slice(None), slice(None)) + tuple(slice(0, t) for t in target)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[sl] = g
        accumulate(a, full)

    return make_result(a.data[sl].copy(), (a,), backward)


def _reflect_index(n: int, pad: int) -> np.ndarray:
    idx = np.arange(-pad, n + pad)
    period = 2 * (n - 1) if n > 1 else 1
    idx = np.abs(idx) % period if n > 1 else np.zeros_like(idx)
    return np.where(idx >= n, period - idx, idx)


def pad_reflect(a: Tensor, pad: int) -> Tensor:
    """Mirror padding (edge voxel not repeated) on the spatial axes."""
    if pad == 0:
        return a
    idx = [_reflect_index(n, pad) for n in a.shape[2:]]
    out = a.data[:, :, idx[0]][:, :, :, idx[1]][:, :, :, :, idx[2]]
    shape = a.shape

    def backward(g):
        for axis in (4, 3, 2):
            n = shape[axis]
            acc_shape = list(g.shape)
            acc_shape[axis] = n
            acc = np.zeros(acc_shape, dtype=g.dtype)
            np.add.at(acc, (slice(None),) * axis + (idx[axis - 2],), g)
            g = acc
        accumulate(a, g)

    return make_result(out, (a,), backward)


def crop_border(a: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return a
    sl = (slice(None), slice(None)) + (slice(pad, -pad),) * 3
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[sl] = g
        accumulate(a, full)

    return make_result(a.data[sl].copy(), (a,), backward)


def forward_diff(a: Tensor, axis: int) -> Tensor:
    """x[i+1] - x[i] along ``axis``; the last plane is dropped."""
    hi = [slice(None)] * a.ndim
    lo = [slice(None)] * a.ndim
    hi[axis] = slice(1, None)
    lo[axis] = slice(0, -1)
    hi, lo = tuple(hi), tuple(lo)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[hi] += g
        full[lo] -= g
        accumulate(a, full)

    return make_result(a.data[hi] - a.data[lo], (a,), backward)


def permutation(a: Tensor, forward, inverse) -> Tensor:
    """Wrap a value-preserving reindexing; its gradient is the inverse map."""
    return make_result(forward(a.data), (a,), lambda g: accumulate(a, inverse(g)))


def axis_linear(a: Tensor, matrix: np.ndarray, axis: int) -> Tensor:
    """Apply ``matrix`` (n_out, n_in) along ``axis``."""
    m = matrix.astype(a.dtype)

    def apply(x, mat):
        y = np.tensordot(mat, np.moveaxis(x, axis, 0), axes=([1], [0]))
        return np.ascontiguousarray(np.moveaxis(y, 0, axis))

    return make_result(apply(a.data, m), (a,), lambda g: accumulate(a, apply(g, m.T)))


def scale_channels(a: Tensor, s: Tensor) -> Tensor:
    """a[b, c, ...] * s[b, c]"""
    if s.shape != a.shape[:2]:
        raise ValueError(f"scale shape {s.shape} does not match {a.shape[:2]}")
    expand = s.data.reshape(s.shape + (1,) * (a.ndim - 2))
    axes = tuple(range(2, a.ndim))

    def backward(g):
        accumulate(a, g * expand)
        accumulate(s, (g * a.data).sum(axis=axes))

    return make_result(a.data * expand, (a, s), backward)
