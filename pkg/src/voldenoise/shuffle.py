"""Space-to-channel reindexing for rank-5 (B, C, D, H, W) arrays.

Two bijections are provided.

``volume_unshuffle`` / ``volume_shuffle`` use contiguous v^3 blocks: output
channel ``c * v^3 + dd * v^2 + dh * v + dw`` at coarse position (d, h, w)
holds input voxel (d*v + dd, h*v + dh, w*v + dw).

``strided_unshuffle`` / ``strided_shuffle`` split each axis index as
``i = v^2 * a + v * b + c``; the middle digit ``b`` moves to the channel axis
and the coarse position is ``v * a + c``.  Voxels that share a coarse
position are exactly v apart, and a coarse offset o always corresponds to a
fine offset congruent to o modulo v.  This is the variant that keeps a
blind-spot network blind: after a centrally masked convolution, channel
mixing and v-dilated convolutions in the coarse domain can never bring an
offset back to zero.  It needs each spatial axis divisible by v^2.

Both accept numpy arrays or autograd Tensors; for Tensors the gradient is
the inverse permutation of the upstream gradient.
"""

from __future__ import annotations

import numpy as np

from .autograd.tensor import Tensor, permutation


def _check_spatial(shape, multiple: int, what: str):
    for axis, n in zip("DHW", shape[2:]):
        if n % multiple:
            raise ValueError(f"{what}: axis {axis} has size {n}, not divisible by {multiple}")


def _block_unshuffle(x: np.ndarray, v: int) -> np.ndarray:
    b, c, d, h, w = x.shape
    y = x.reshape(b, c, d // v, v, h // v, v, w // v, v)
    y = y.transpose(0, 1, 3, 5, 7, 2, 4, 6)
    return np.ascontiguousarray(y).reshape(b, c * v ** 3, d // v, h // v, w // v)


def _block_shuffle(x: np.ndarray, v: int) -> np.ndarray:
    b, c, d, h, w = x.shape
    c0 = c // v ** 3
    y = x.reshape(b, c0, v, v, v, d, h, w)
    y = y.transpose(0, 1, 5, 2, 6, 3, 7, 4)
    return np.ascontiguousarray(y).reshape(b, c0, d * v, h * v, w * v)


def _strided_unshuffle(x: np.ndarray, v: int) -> np.ndarray:
    b, c, d, h, w = x.shape
    y = x.reshape(b, c, d // v ** 2, v, v, h // v ** 2, v, v, w // v ** 2, v, v)
    # (b, c, ad, bd, cd, ah, bh, ch, aw, bw, cw) -> (b, c, bd, bh, bw, ad, cd, ah, ch, aw, cw)
    y = y.transpose(0, 1, 3, 6, 9, 2, 4, 5, 7, 8, 10)
    return np.ascontiguousarray(y).reshape(b, c * v ** 3, d // v, h // v, w // v)


def _strided_shuffle(x: np.ndarray, v: int) -> np.ndarray:
    b, c, d, h, w = x.shape
    c0 = c // v ** 3
    y = x.reshape(b, c0, v, v, v, d // v, v, h // v, v, w // v, v)
    # (b, c0, bd, bh, bw, ad, cd, ah, ch, aw, cw) -> (b, c0, ad, bd, cd, ah, bh, ch, aw, bw, cw)
    y = y.transpose(0, 1, 5, 2, 6, 7, 3, 8, 9, 4, 10)
    return np.ascontiguousarray(y).reshape(b, c0, d * v, h * v, w * v)


def _apply(x, fwd, inv):
    if isinstance(x, Tensor):
        return permutation(x, fwd, inv)
    return fwd(np.asarray(x))


def _check_factor(v: int):
    if not isinstance(v, (int, np.integer)) or v < 1:
        raise ValueError(f"shuffle factor must be a positive integer, got {v!r}")


def volume_unshuffle(x, v: int):
    """(B, C, D, H, W) -> (B, C*v^3, D/v, H/v, W/v), contiguous blocks."""
    _check_factor(v)
    _check_spatial(x.shape, v, "volume_unshuffle")
    return _apply(x, lambda a: _block_unshuffle(a, v), lambda g: _block_shuffle(g, v))


def volume_shuffle(x, v: int):
    """Inverse of :func:`volume_unshuffle`."""
    _check_factor(v)
    if x.shape[1] % v ** 3:
        raise ValueError(f"volume_shuffle: {x.shape[1]} channels not divisible by v^3 = {v ** 3}")
    return _apply(x, lambda a: _block_shuffle(a, v), lambda g: _block_unshuffle(g, v))


def strided_unshuffle(x, v: int):
    """(B, C, D, H, W) -> (B, C*v^3, D/v, H/v, W/v); axes must divide by v^2."""
    _check_factor(v)
    _check_spatial(x.shape, v * v, "strided_unshuffle")
    return _apply(x, lambda a: _strided_unshuffle(a, v), lambda g: _strided_shuffle(g, v))


def strided_shuffle(x, v: int):
    """Inverse of :func:`strided_unshuffle`."""
    _check_factor(v)
    if x.shape[1] % v ** 3:
        raise ValueError(f"strided_shuffle: {x.shape[1]} channels not divisible by v^3 = {v ** 3}")
    _check_spatial(x.shape, v, "strided_shuffle")
    return _apply(x, lambda a: _strided_shuffle(a, v), lambda g: _strided_unshuffle(g, v))


def strided_source_index(s: int, b: int, v: int) -> int:
    """Fine index held by coarse position ``s`` and channel digit ``b``."""
    a, c = divmod(s, v)
    return v * v * a + v * b + c


UNSHUFFLE = {"block": volume_unshuffle, "strided": strided_unshuffle}
SHUFFLE = {"block": volume_shuffle, "strided": strided_shuffle}
