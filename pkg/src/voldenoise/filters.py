"""Volumetric smoothing and edge filters plus Fourier helpers.

All spatial filters mirror-pad at the border (the edge voxel is not
repeated), matching ``np.pad(mode="reflect")``.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import ndimage

from .volgrid import Volume

# 3 axes + 4 body diagonals, unit length
EDGE_DIRECTIONS = np.array(
    [[1, 0, 0], [0, 1, 0], [0, 0, 1],
     [1, 1, 1], [1, 1, -1], [1, -1, 1], [-1, 1, 1]], dtype=np.float64)
EDGE_DIRECTIONS /= np.linalg.norm(EDGE_DIRECTIONS, axis=1, keepdims=True)
EDGE_EPS = 1e-6


def _unwrap(v):
    if isinstance(v, Volume):
        return v.data.astype(np.float64), v.spacing
    return np.asarray(v, dtype=np.float64), None


def _wrap(arr, spacing):
    if spacing is None:
        return arr.astype(np.float32)
    return Volume(arr, spacing)


# --------------------------------------------------------------------------
# smoothing
# --------------------------------------------------------------------------


def gaussian_kernel1d(sigma: float, truncate: float = 3.0) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    assert abs(k.sum() - 1.0) < 1e-12
    return k


def gaussian3d(v, sigma: float, truncate: float = 3.0):
    """Separable Gaussian, radius ceil(truncate * sigma), kernel summing to 1."""
    arr, spacing = _unwrap(v)
    k = gaussian_kernel1d(sigma, truncate)
    for axis in range(3):
        arr = ndimage.correlate1d(arr, k, axis=axis, mode="mirror")
    return _wrap(arr, spacing)


def bilateral3d(v, sigma_s: float, sigma_r: float):
    """Brute-force bilateral filter over a cubic window of radius ceil(2 sigma_s)."""
    if not sigma_s > 0 or not sigma_r > 0:
        raise ValueError(f"bilateral sigmas must be positive, got {sigma_s}, {sigma_r}")
    arr, spacing = _unwrap(v)
    r = int(math.ceil(2 * sigma_s))
    pad = np.pad(arr, r, mode="reflect")
    d, h, w = arr.shape
    num = np.zeros_like(arr)
    den = np.zeros_like(arr)
    inv_s, inv_r = -0.5 / sigma_s ** 2, -0.5 / sigma_r ** 2
    for dz, dy, dx in itertools.product(range(-r, r + 1), repeat=3):
        q = pad[r + dz:r + dz + d, r + dy:r + dy + h, r + dx:r + dx + w]
        wgt = math.exp(inv_s * (dz * dz + dy * dy + dx * dx)) * np.exp(inv_r * (q - arr) ** 2)
        num += wgt * q
        den += wgt
    return _wrap(num / den, spacing)


# --------------------------------------------------------------------------
# edges
# --------------------------------------------------------------------------


def edge_kernels() -> np.ndarray:
    """(7, 3, 3, 3) Sobel-type derivative kernels along EDGE_DIRECTIONS.

    K_n(p) = (p . n) * prod_i (2 - |p_i|), scaled so a unit-slope ramp along
    n gives response 1.  Each kernel is antisymmetric and sums to zero.
    """
    p = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), axis=-1).astype(np.float64)
    smooth = np.prod(2 - np.abs(p), axis=-1)
    out = []
    for n in EDGE_DIRECTIONS:
        proj = p @ n
        k = proj * smooth
        k /= (k * proj).sum()
        assert abs(k.sum()) < 1e-12
        out.append(k)
    return np.stack(out)


def edge_responses(v) -> np.ndarray:
    """(7, D, H, W) directional derivative responses, mirror-padded."""
    arr, _ = _unwrap(v)
    return np.stack([ndimage.correlate(arr, k, mode="mirror") for k in edge_kernels()])


def edge_enhancer(v):
    """Multi-directional edge magnitude sqrt(sum_n r_n^2 + eps^2) - eps."""
    arr, spacing = _unwrap(v)
    r = edge_responses(arr)
    mag = np.sqrt((r * r).sum(axis=0) + EDGE_EPS ** 2) - EDGE_EPS
    return _wrap(mag, spacing)


# --------------------------------------------------------------------------
# Fourier
# --------------------------------------------------------------------------


def dft3d(v) -> np.ndarray:
    arr, _ = _unwrap(v)
    return np.fft.fftn(arr)


def idft3d(spectrum, spacing: float | None = None):
    arr = np.fft.ifftn(spectrum).real
    return _wrap(arr, spacing)


def frequency_grid(shape) -> np.ndarray:
    """Radial frequency magnitude in cycles/voxel for every FFT bin."""
    axes = np.meshgrid(*[np.fft.fftfreq(n) for n in shape], indexing="ij")
    return np.sqrt(sum(a * a for a in axes))


def lowpass(v, cutoff: float):
    """Zero every Fourier coefficient above ``cutoff`` cycles/voxel."""
    if not 0 < cutoff:
        raise ValueError(f"cutoff must be positive, got {cutoff}")
    arr, spacing = _unwrap(v)
    spec = np.fft.fftn(arr)
    spec[frequency_grid(arr.shape) > cutoff] = 0
    return _wrap(np.fft.ifftn(spec).real, spacing)
