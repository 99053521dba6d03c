"""Network layers: masked/dilated/grouped 3D convolution, LayerNorm,
SimpleGate, simplified channel attention, pooling and interpolation."""

from __future__ import annotations

import numpy as np

from .tensor import (Tensor, accumulate, as_tensor, axis_linear, channel_slice, concat,
                     make_result, scale_channels)


def central_mask(kernel: int, center: int) -> np.ndarray:
    """Kernel mask with ones on active taps and a zeroed central ``center``^3 block."""
    if kernel % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {kernel}")
    mask = np.ones((kernel,) * 3, dtype=np.uint8)
    if center:
        if center % 2 == 0 or center >= kernel:
            raise ValueError(f"central block {center} must be odd and smaller than kernel {kernel}")
        lo = (kernel - center) // 2
        mask[lo:lo + center, lo:lo + center, lo:lo + center] = 0
    return mask


def _tap_list(k: int, mask) -> list[tuple[int, int, int]]:
    if mask is None:
        return [tuple(t) for t in np.ndindex(k, k, k)]
    return [tuple(t) for t in np.argwhere(np.asarray(mask) != 0)]


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 1,
           groups: int = 1, mask=None) -> Tensor:
    """'Same' 3D convolution with zero padding ``dilation * (k - 1) / 2``.

    ``mask`` (k, k, k) marks active taps with 1; masked taps are left out of
    the sum entirely, so neither the weight nor the input under them can
    influence the result or receive gradient.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 5:
        raise ValueError(f"conv3d expects (B, C, D, H, W) input, got {x.shape}")
    c_out, c_group, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise ValueError(f"cubic kernels only, got {weight.shape[2:]}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if mask is not None and np.shape(mask) != (k, k, k):
        raise ValueError(f"mask shape {np.shape(mask)} does not match kernel {(k, k, k)}")
    c_in = x.shape[1]
    if c_in != c_group * groups or c_out % groups:
        raise ValueError(f"channel mismatch: input {c_in}, weight {weight.shape}, groups {groups}")

    if groups > 1 and not (c_group == 1 and c_out == c_in):
        outs = []
        step_in, step_out = c_group, c_out // groups
        for g in range(groups):
            w_g = channel_slice_rows(weight, g * step_out, (g + 1) * step_out)
            b_g = channel_slice_rows(bias, g * step_out, (g + 1) * step_out) if bias is not None else None
            x_g = channel_slice(x, g * step_in, (g + 1) * step_in)
            outs.append(conv3d(x_g, w_g, b_g, dilation, 1, mask))
        return concat(outs, axis=1)

    taps = _tap_list(k, mask)
    if groups > 1:
        out = _depthwise(x, weight, taps, dilation)
    elif k == 1:
        out = _pointwise(x, weight)
    else:
        out = _dense(x, weight, taps, dilation)
    if bias is not None:
        out = add_channel_bias(out, as_tensor(bias))
    return out


def channel_slice_rows(w: Tensor, start: int, stop: int) -> Tensor:
    shape, dtype = w.shape, w.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        accumulate(w, full)

    return make_result(w.data[start:stop].copy(), (w,), backward)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    view = b.data.reshape((1, -1) + (1,) * (x.ndim - 2))
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        accumulate(x, g)
        accumulate(b, g.sum(axis=axes))

    return make_result(x.data + view, (x, b), backward)


def _pointwise(x: Tensor, weight: Tensor) -> Tensor:
    b, c_in = x.shape[:2]
    spatial = x.shape[2:]
    w2 = weight.data[:, :, 0, 0, 0]
    xr = x.data.reshape(b, c_in, -1)
    out = np.matmul(w2, xr).reshape((b, w2.shape[0]) + spatial)

    def backward(g):
        gr = g.reshape(b, w2.shape[0], -1)
        if weight.requires_grad:
            gw = np.tensordot(gr, xr, axes=([0, 2], [0, 2]))
            accumulate(weight, gw.reshape(weight.shape))
        if x.requires_grad:
            accumulate(x, np.matmul(w2.T, gr).reshape(x.shape))

    return make_result(out, (x, weight), backward)


def _padded(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * 3)


def _tap_view(arr: np.ndarray, tap, dilation: int, spatial):
    return arr[(slice(None), slice(None)) +
               tuple(slice(t * dilation, t * dilation + n) for t, n in zip(tap, spatial))]


def _depthwise(x: Tensor, weight: Tensor, taps, dilation: int) -> Tensor:
    k = weight.shape[2]
    pad = dilation * (k - 1) // 2
    spatial = x.shape[2:]
    xp = _padded(x.data, pad)
    w = weight.data[:, 0]
    out = np.zeros(x.shape, dtype=x.dtype)
    for tap in taps:
        out += w[(slice(None),) + tap][None, :, None, None, None] * _tap_view(xp, tap, dilation, spatial)

    def backward(g):
        if weight.requires_grad:
            gw = np.zeros(weight.shape, dtype=weight.dtype)
            for tap in taps:
                gw[(slice(None), 0) + tap] = np.einsum(
                    "bcdhw,bcdhw->c", g, _tap_view(xp, tap, dilation, spatial))
            accumulate(weight, gw)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for tap in taps:
                _tap_view(gxp, tap, dilation, spatial)[...] += \
                    w[(slice(None),) + tap][None, :, None, None, None] * g
            accumulate(x, gxp[(slice(None), slice(None)) + (slice(pad, -pad or None),) * 3])

    return make_result(out, (x, weight), backward)


def _dense(x: Tensor, weight: Tensor, taps, dilation: int) -> Tensor:
    b, c_in = x.shape[:2]
    spatial = x.shape[2:]
    c_out, k = weight.shape[0], weight.shape[2]
    pad = dilation * (k - 1) // 2
    xp = _padded(x.data, pad)
    n_taps = len(taps)
    cols = np.empty((b, c_in, n_taps) + spatial, dtype=x.dtype)
    for i, tap in enumerate(taps):
        cols[:, :, i] = _tap_view(xp, tap, dilation, spatial)
    cols = cols.reshape(b, c_in * n_taps, -1)
    tap_index = tuple(np.array(t) for t in zip(*taps))
    wmat = weight.data[(slice(None), slice(None)) + tap_index].reshape(c_out, c_in * n_taps)
    out = np.matmul(wmat, cols).reshape((b, c_out) + spatial)

    def backward(g):
        gr = g.reshape(b, c_out, -1)
        if weight.requires_grad:
            gw_taps = np.tensordot(gr, cols, axes=([0, 2], [0, 2])).reshape(c_out, c_in, n_taps)
            gw = np.zeros(weight.shape, dtype=weight.dtype)
            gw[(slice(None), slice(None)) + tap_index] = gw_taps
            accumulate(weight, gw)
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gr).reshape((b, c_in, n_taps) + spatial)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i, tap in enumerate(taps):
                _tap_view(gxp, tap, dilation, spatial)[...] += gcols[:, :, i]
            accumulate(x, gxp[(slice(None), slice(None)) + (slice(pad, -pad or None),) * 3])

    return make_result(out, (x, weight), backward)


# --------------------------------------------------------------------------
# normalization and gating
# --------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "channel",
               eps: float = 1e-6) -> Tensor:
    """LayerNorm with per-channel affine parameters.

    ``mode="channel"`` normalizes each voxel over its channels (pointwise in
    space); ``mode="sample"`` pools the statistics over (C, D, H, W).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if mode == "channel":
        axes = (1,)
    elif mode == "sample":
        axes = tuple(range(1, x.ndim))
    else:
        raise ValueError(f"unknown layer_norm mode {mode!r}")
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = (1, -1) + (1,) * (x.ndim - 2)
    gm, bt = gamma.data.reshape(shape), beta.data.reshape(shape)
    out = xhat * gm + bt
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=red))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=red))
        if x.requires_grad:
            gx = g * gm
            m1 = gx.mean(axis=axes, keepdims=True)
            m2 = (gx * xhat).mean(axis=axes, keepdims=True)
            accumulate(x, inv * (gx - m1 - xhat * m2))

    return make_result(out, (x, gamma, beta), backward)


def simple_gate(x: Tensor) -> Tensor:
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"simple_gate needs an even channel count, got {c}")
    h = c // 2
    a, b = x.data[:, :h], x.data[:, h:]

    def backward(g):
        accumulate(x, np.concatenate([g * b, g * a], axis=1))

    return make_result(a * b, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(B, C, D, H, W) -> (B, C) spatial mean."""
    spatial = x.shape[2:]
    n = int(np.prod(spatial))
    dtype = x.dtype

    def backward(g):
        accumulate(x, np.broadcast_to((g / n).astype(dtype)[:, :, None, None, None], x.shape))

    return make_result(x.data.mean(axis=(2, 3, 4)), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(B, C_in) @ W^T + b with W of shape (C_out, C_in)."""
    x, weight = as_tensor(x), as_tensor(weight)

    def backward(g):
        accumulate(x, g @ weight.data)
        accumulate(weight, g.T @ x.data)

    prod = make_result(x.data @ weight.data.T, (x, weight), backward)
    if bias is None:
        return prod
    bias = as_tensor(bias)

    def bias_backward(g):
        accumulate(prod, g)
        accumulate(bias, g.sum(axis=0))

    return make_result(prod.data + bias.data[None, :], (prod, bias), bias_backward)


def channel_attention(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                      enabled: bool = True) -> Tensor:
    """Simplified channel attention: x * (W @ GAP(x) + b) per channel.

    With ``enabled=False`` the gate is fixed to one and the layer is the
    identity, which removes the only global dependency in the network.
    """
    if not enabled:
        return x
    return scale_channels(x, linear(global_avg_pool(x), weight, bias))


# --------------------------------------------------------------------------
# ablation-only resampling (not J-invariant)
# --------------------------------------------------------------------------


def max_pool3d(x: Tensor, v: int) -> Tensor:
    b, c, d, h, w = x.shape
    if d % v or h % v or w % v:
        raise ValueError(f"max_pool3d: spatial dims {x.shape[2:]} not divisible by {v}")
    blocks = x.data.reshape(b, c, d // v, v, h // v, v, w // v, v)
    blocks = blocks.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(b, c, d // v, h // v, w // v, v ** 3)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, d // v, h // v, w // v, v, v, v).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        accumulate(x, gb.reshape(x.shape))

    return make_result(out, (x,), backward)


def linear_upsample_matrix(n_in: int, v: int) -> np.ndarray:
    """(n_in * v, n_in) linear interpolation, half-pixel centres, edge clamp."""
    n_out = n_in * v
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) / v - 0.5
        lo = int(np.floor(src))
        t = src - lo
        for j, wgt in ((lo, 1 - t), (lo + 1, t)):
            m[i, min(max(j, 0), n_in - 1)] += wgt
    return m


def upsample_linear(x: Tensor, v: int) -> Tensor:
    for axis in (2, 3, 4):
        x = axis_linear(x, linear_upsample_matrix(x.shape[axis], v), axis)
    return x
