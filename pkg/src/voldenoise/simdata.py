"""Synthetic phantoms, noise models and missing-wedge emulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volgrid import Volume


@dataclass(frozen=True)
class PhantomSpec:
    """Object counts and size ranges (voxels) for :func:`make_phantom`."""

    spheres: int = 6
    shells: int = 3
    rods: int = 4
    radius: tuple[float, float] = (4.0, 10.0)
    shell_thickness: tuple[float, float] = (1.5, 3.0)
    rod_radius: tuple[float, float] = (1.5, 3.0)
    intensity: tuple[float, float] = (0.4, 1.0)

    @classmethod
    def empty(cls) -> "PhantomSpec":
        return cls(spheres=0, shells=0, rods=0)


def _supersampled_coords(dims, factor: int = 2):
    # sub-voxel sample centres of each voxel, shape (D*f, H*f, W*f) per axis
    axes = [(np.arange(n * factor) + 0.5) / factor - 0.5 for n in dims]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def _downsample(hi: np.ndarray, factor: int) -> np.ndarray:
    d, h, w = (n // factor for n in hi.shape)
    return hi.reshape(d, factor, h, factor, w, factor).mean(axis=(1, 3, 5))


def sphere_occupancy(dims, center, radius, factor: int = 2) -> np.ndarray:
    z, y, x = _supersampled_coords(dims, factor)
    r2 = (z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2
    return _downsample((r2 <= radius * radius).astype(np.float64), factor)


def make_phantom(dims=(64, 64, 64), seed: int = 0, spec: PhantomSpec | None = None,
                 supersample: int = 2, spacing: float = 1.0) -> Volume:
    """Random solid spheres, hollow shells and rods composited by maximum, in [0, 1]."""
    spec = spec or PhantomSpec()
    dims = tuple(int(n) for n in dims)
    rng = np.random.default_rng(seed)
    f = supersample
    z, y, x = _supersampled_coords(dims, f)
    hi = np.zeros(tuple(n * f for n in dims))
    lo_i, hi_i = spec.intensity

    def centre(margin):
        return [rng.uniform(min(margin, n / 2), max(n - margin, n / 2)) for n in dims]

    for _ in range(spec.spheres):
        r = rng.uniform(*spec.radius)
        c = centre(r)
        val = rng.uniform(lo_i, hi_i)
        inside = (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2 <= r * r
        hi = np.maximum(hi, inside * val)
    for _ in range(spec.shells):
        r = rng.uniform(*spec.radius) + spec.shell_thickness[1]
        t = rng.uniform(*spec.shell_thickness)
        c = centre(r)
        val = rng.uniform(lo_i, hi_i)
        d2 = (z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2
        inside = (d2 <= r * r) & (d2 >= (r - t) ** 2)
        hi = np.maximum(hi, inside * val)
    for _ in range(spec.rods):
        rr = rng.uniform(*spec.rod_radius)
        p = np.array(centre(0))
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        val = rng.uniform(lo_i, hi_i)
        rel = [z - p[0], y - p[1], x - p[2]]
        along = rel[0] * u[0] + rel[1] * u[1] + rel[2] * u[2]
        d2 = rel[0] ** 2 + rel[1] ** 2 + rel[2] ** 2 - along ** 2
        hi = np.maximum(hi, (d2 <= rr * rr) * val)
    out = np.clip(_downsample(hi, f), 0.0, 1.0)
    return Volume(out, spacing)


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------


def add_awgn(v: Volume, sigma: float, seed: int) -> Volume:
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(v.dims) * sigma
    return v.with_data(v.data.astype(np.float64) + noise)


def add_poisson(v: Volume, lam: float, seed: int) -> Volume:
    """Shot noise with gain ``lam``: lam * Poisson(max(v, 0) / lam)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    rng = np.random.default_rng(seed)
    rate = np.clip(v.data.astype(np.float64), 0, None) / lam
    return v.with_data(lam * rng.poisson(rate))


def add_mixture(v: Volume, sigma: float, lam: float, weights=(0.5, 0.5), seed: int = 0) -> Volume:
    """Convex combination of an AWGN and a Poisson rendering (independent streams)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (2,) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError(f"mixture weights must be two nonnegative numbers, got {weights}")
    w = w / w.sum()
    seeds = np.random.SeedSequence(seed).generate_state(2)
    parts = []
    if w[0] > 0:
        parts.append(w[0] * add_awgn(v, sigma, int(seeds[0])).data.astype(np.float64))
    if w[1] > 0:
        parts.append(w[1] * add_poisson(v, lam, int(seeds[1])).data.astype(np.float64))
    return v.with_data(sum(parts))


NOISE_MODELS = ("awgn", "poisson", "mixture")


def add_noise(v: Volume, model: str, seed: int, sigma: float = 0.2, lam: float = 0.02,
              weights=(0.5, 0.5)) -> Volume:
    if model == "awgn":
        return add_awgn(v, sigma, seed)
    if model == "poisson":
        return add_poisson(v, lam, seed)
    if model == "mixture":
        return add_mixture(v, sigma, lam, weights, seed)
    raise ValueError(f"unknown noise model {model!r}")


# --------------------------------------------------------------------------
# missing wedge
# --------------------------------------------------------------------------


def wedge_mask(shape, theta_max: float) -> np.ndarray:
    """True for sampled Fourier bins.

    Axes are (z, y, x) with the beam along z and the tilt axis along y; a
    bin is missing when its (f_z, f_x) direction is more than ``theta_max``
    away from the x axis, i.e. atan2(|f_z|, |f_x|) > theta_max.
    """
    if not 0 < theta_max <= 90:
        raise ValueError(f"theta_max must lie in (0, 90], got {theta_max}")
    fz = np.fft.fftfreq(shape[0])[:, None, None]
    fx = np.fft.fftfreq(shape[2])[None, None, :]
    ang = np.degrees(np.arctan2(np.abs(fz), np.abs(fx)))
    keep = (ang <= theta_max + 1e-9) | ((fz == 0) & (fx == 0))
    return np.broadcast_to(keep, shape)


def apply_missing_wedge(v: Volume, theta_max: float) -> Volume:
    mask = wedge_mask(v.dims, theta_max)
    spec = np.fft.fftn(v.data.astype(np.float64))
    # the mask is point-symmetric (|f| only), so Hermitian symmetry survives
    spec = np.where(mask, spec, 0)
    out = np.fft.ifftn(spec)
    return v.with_data(out.real)


# --------------------------------------------------------------------------
# FSC halves
# --------------------------------------------------------------------------


def make_halves(clean: Volume, model: str = "awgn", seeds=(1, 2), **noise) -> tuple[Volume, Volume]:
    s1, s2 = seeds
    if s1 == s2:
        import warnings

        warnings.warn("identical seeds give identical halves; invalid for FSC", stacklevel=2)
    return add_noise(clean, model, s1, **noise), add_noise(clean, model, s2, **noise)
