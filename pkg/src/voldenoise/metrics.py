"""Image-quality metrics: PSNR, 3D SSIM, Fourier shell correlation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volgrid import Volume

PSNR_CAP_DB = 100.0


def _arr(v) -> np.ndarray:
    return (v.data if isinstance(v, Volume) else np.asarray(v)).astype(np.float64)


@dataclass(frozen=True)
class PsnrResult:
    db: float
    capped: bool

    def __float__(self):
        return self.db


def psnr(test, ref, peak: float | None = None) -> PsnrResult:
    """10 log10(peak^2 / MSE); ``peak`` defaults to the dynamic range of ``ref``."""
    a, b = _arr(test), _arr(ref)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if peak is None:
        peak = float(b.max() - b.min())
    if not peak > 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PsnrResult(PSNR_CAP_DB, True)
    return PsnrResult(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB), False)


def ssim_window(size: int = 7, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    w = g[:, None, None] * g[None, :, None] * g[None, None, :]
    return w / w.sum()


def ssim_map(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03,
             data_range: float | None = None) -> np.ndarray:
    """Local SSIM at each window position fully inside the volume.

    ``b`` is the reference; ``data_range`` defaults to its dynamic range.
    """
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < window:
        raise ValueError(f"volume {x.shape} smaller than the {window}^3 SSIM window")
    if data_range is None:
        data_range = float(y.max() - y.min()) or 1.0
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    w = ssim_window(window)
    h = window // 2
    crop = (slice(h, -h or None),) * 3

    def filt(z):
        return ndimage.correlate(z, w, mode="constant")[crop]

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim3d(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03,
           data_range: float | None = None) -> float:
    if a is b or np.array_equal(_arr(a), _arr(b)):
        return 1.0
    return float(ssim_map(a, b, window, k1, k2, data_range).mean())


# --------------------------------------------------------------------------
# Fourier shell correlation
# --------------------------------------------------------------------------


@dataclass
class FscCurve:
    frequency: np.ndarray   # cycles/voxel at each shell
    correlation: np.ndarray
    counts: np.ndarray
    dropped: list[int]


def shell_index(shape) -> tuple[np.ndarray, int]:
    """Integer shell of each FFT bin (radius in units of 1/N_min) and the count of shells."""
    n = min(shape)
    axes = np.meshgrid(*[np.fft.fftfreq(m) * n for m in shape], indexing="ij")
    r = np.sqrt(sum(a * a for a in axes))
    return np.rint(r).astype(np.int64), n // 2 + 1


def fsc(a, b, n_shells: int | None = None) -> FscCurve:
    x, y = _arr(a), _arr(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    fa, fb = np.fft.fftn(x), np.fft.fftn(y)
    shells, n_max = shell_index(x.shape)
    n_shells = n_max if n_shells is None else min(n_shells, n_max)
    shells = shells.ravel()
    keep = shells < n_shells
    idx = shells[keep]
    cross = np.bincount(idx, (fa.ravel() * np.conj(fb.ravel())).real[keep], n_shells)
    pa = np.bincount(idx, (np.abs(fa.ravel()) ** 2)[keep], n_shells)
    pb = np.bincount(idx, (np.abs(fb.ravel()) ** 2)[keep], n_shells)
    counts = np.bincount(idx, minlength=n_shells)
    den = np.sqrt(pa * pb)
    valid = (counts > 0) & (den > 0)
    dropped = [int(s) for s in np.nonzero(~valid)[0]]
    if dropped:
        warnings.warn(f"FSC: dropped empty shells {dropped}", stacklevel=2)
    freq = np.arange(n_shells) / min(x.shape)
    corr = np.divide(cross, den, out=np.zeros(n_shells), where=valid)
    return FscCurve(freq[valid], corr[valid], counts[valid], dropped)


@dataclass(frozen=True)
class Resolution:
    angstrom: float
    frequency: float
    crossed: bool


def fsc_resolution(curve: FscCurve | tuple, spacing: float = 1.0, threshold: float = 0.5) -> Resolution:
    """First crossing below ``threshold``, linearly interpolated between shells."""
    if isinstance(curve, FscCurve):
        f, c = curve.frequency, curve.correlation
    else:
        f, c = (np.asarray(z, dtype=np.float64) for z in curve)
    for i in range(1, len(c)):
        if c[i] < threshold <= c[i - 1]:
            t = (c[i - 1] - threshold) / (c[i - 1] - c[i])
            fc = f[i - 1] + t * (f[i] - f[i - 1])
            return Resolution(spacing / fc, float(fc), True)
    if len(c) and c[0] < threshold:
        fc = float(f[1]) if len(f) > 1 else 0.5
        return Resolution(spacing / fc, fc, True)
    return Resolution(2.0 * spacing, 0.5, False)
