"""Volume container, CVOL/MRC file I/O, intensity normalization and
overlapping patch extraction / stitching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CVOL_MAGIC = b"CVOL"
CVOL_VERSION = 1
_CVOL_HEADER = struct.Struct("<4sIIIIf")

MRC_HEADER_BYTES = 1024


class VolumeFormatError(ValueError):
    """Base class for malformed volume files."""


class BadMagicError(VolumeFormatError):
    pass


class TruncatedBodyError(VolumeFormatError):
    pass


class NonFiniteError(VolumeFormatError):
    pass


class UnsupportedModeError(VolumeFormatError):
    pass


class ByteOrderError(VolumeFormatError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    """Dense (D, H, W) float32 grid with isotropic voxel spacing in Angstrom."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("volume contains non-finite values")
        if not (self.spacing > 0 and np.isfinite(self.spacing)):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", float(np.float32(self.spacing)))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing)


# --------------------------------------------------------------------------
# CVOL
# --------------------------------------------------------------------------


def write_cvol(path, vol: Volume) -> None:
    d, h, w = vol.dims
    header = _CVOL_HEADER.pack(CVOL_MAGIC, CVOL_VERSION, d, h, w, vol.spacing)
    body = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_cvol(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != CVOL_MAGIC:
        raise BadMagicError(f"{path}: not a CVOL file (bad magic {raw[:4]!r})")
    if len(raw) < _CVOL_HEADER.size:
        raise TruncatedBodyError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, d, h, w, spacing = _CVOL_HEADER.unpack_from(raw)
    if version != CVOL_VERSION:
        raise VolumeFormatError(f"{path}: unsupported CVOL version {version}")
    n = d * h * w
    body = raw[_CVOL_HEADER.size:]
    if len(body) != 4 * n:
        raise TruncatedBodyError(
            f"{path}: header declares {d}x{h}x{w} = {n} values, body holds {len(body) / 4:g}"
        )
    data = np.frombuffer(body, dtype="<f4").reshape(d, h, w)
    if not np.all(np.isfinite(data)):
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise NonFiniteError(f"{path}: {bad} non-finite values in body")
    return Volume(data, spacing)


# --------------------------------------------------------------------------
# MRC (read-only, mode 2)
# --------------------------------------------------------------------------


def _mrc_byte_order(header: bytes) -> str:
    stamp = header[212:214]
    if stamp in (b"\x44\x44", b"\x44\x41"):
        declared = "<"
    elif stamp == b"\x11\x11":
        declared = ">"
    else:
        declared = None

    def plausible(order):
        nx, ny, nz, mode = struct.unpack_from(order + "4i", header)
        return 0 < nx < 1 << 20 and 0 < ny < 1 << 20 and 0 < nz < 1 << 20 and 0 <= mode < 20

    if declared is None:
        # pre-2014 writers may leave MACHST empty
        for order in ("<", ">"):
            if plausible(order):
                return order
        raise ByteOrderError("cannot determine MRC byte order")
    if not plausible(declared):
        raise ByteOrderError(f"MACHST declares {'little' if declared == '<' else 'big'}-endian "
                             "but header words are implausible in that byte order")
    return declared


def read_mrc(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < MRC_HEADER_BYTES:
        raise TruncatedBodyError(f"{path}: shorter than the 1024-byte MRC header")
    header = raw[:MRC_HEADER_BYTES]
    order = _mrc_byte_order(header)
    nx, ny, nz, mode = struct.unpack_from(order + "4i", header, 0)
    if mode != 2:
        raise UnsupportedModeError(f"{path}: MRC mode {mode} unsupported (only mode 2, float32)")
    mx, my, mz = struct.unpack_from(order + "3i", header, 28)
    cella = struct.unpack_from(order + "3f", header, 40)
    nsymbt = struct.unpack_from(order + "i", header, 92)[0]
    start = MRC_HEADER_BYTES + max(nsymbt, 0)
    n = nx * ny * nz
    body = raw[start:start + 4 * n]
    if len(body) != 4 * n:
        raise TruncatedBodyError(f"{path}: expected {n} float32 values after header")
    data = np.frombuffer(body, dtype=order + "f4").reshape(nz, ny, nx)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: non-finite values in body")
    sampling = mx if mx > 0 else nx
    spacing = cella[0] / sampling if cella[0] > 0 and np.isfinite(cella[0]) else 1.0
    return Volume(data.astype(np.float32), spacing)


def read_volume(path) -> Volume:
    """Dispatch on magic bytes: CVOL or MRC."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == CVOL_MAGIC:
        return read_cvol(path)
    return read_mrc(path)


# --------------------------------------------------------------------------
# Normalization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationRecord:
    method: str
    offset: float
    scale: float

    def apply(self, data: np.ndarray) -> np.ndarray:
        out = (np.asarray(data, dtype=np.float64) - self.offset) / self.scale
        if self.method == "percentile":
            out = np.clip(out, 0.0, 1.0)
        return out.astype(np.float32)

    def invert(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) * self.scale + self.offset).astype(np.float32)


def normalize(v: Volume, method: str = "percentile") -> tuple[Volume, NormalizationRecord]:
    x = v.data.astype(np.float64)
    if method == "percentile":
        lo, hi = np.percentile(x, [0.5, 99.5])
        if not hi > lo:
            raise DegenerateInputError("percentile normalization needs p99.5 > p0.5")
        rec = NormalizationRecord("percentile", float(lo), float(hi - lo))
    elif method == "zscore":
        std = x.std()
        if not std > 0:
            raise DegenerateInputError("zscore normalization of a constant volume")
        rec = NormalizationRecord("zscore", float(x.mean()), float(std))
    else:
        raise ValueError(f"unknown normalization method {method!r}")
    return v.with_data(rec.apply(x)), rec


def denormalize(v: Volume, rec: NormalizationRecord) -> Volume:
    return v.with_data(rec.invert(v.data))


# --------------------------------------------------------------------------
# Patches
# --------------------------------------------------------------------------


def patch_origins_1d(dim: int, patch_size: int, stride: int) -> list[int]:
    if patch_size > dim:
        raise ValueError(f"patch size {patch_size} exceeds dimension {dim}")
    if not 1 <= stride <= patch_size:
        raise ValueError(f"stride must lie in [1, {patch_size}] so patches cover the volume, got {stride}")
    starts = list(range(0, dim - patch_size + 1, stride))
    if starts[-1] + patch_size < dim:
        starts.append(dim - patch_size)  # shift the last patch inward
    return starts


def cosine_taper(patch_size: int) -> np.ndarray:
    """Separable raised-cosine window, strictly positive on every voxel."""
    t = (np.arange(patch_size) + 0.5) / patch_size
    w1 = 0.5 - 0.5 * np.cos(2 * np.pi * t)
    return w1[:, None, None] * w1[None, :, None] * w1[None, None, :]


@dataclass
class PatchGrid:
    volume_shape: tuple[int, int, int]
    patch_size: int
    stride: int
    origins: list[tuple[int, int, int]]
    taper: np.ndarray = field(repr=False)
    coverage: np.ndarray = field(repr=False)

    def slices(self, i: int) -> tuple[slice, slice, slice]:
        p = self.patch_size
        return tuple(slice(o, o + p) for o in self.origins[i])

    def blend_weights(self, i: int) -> np.ndarray:
        """Per-voxel stitching weight of patch ``i``; weights of all covering
        patches sum to one at every voxel."""
        return self.taper / self.coverage[self.slices(i)]


def make_grid(shape, patch_size: int, stride: int, divisor: int = 1) -> PatchGrid:
    if patch_size % divisor:
        raise ValueError(f"patch size {patch_size} not divisible by {divisor}")
    axes = [patch_origins_1d(int(n), patch_size, stride) for n in shape]
    origins = [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]
    taper = cosine_taper(patch_size)
    coverage = np.zeros(tuple(shape), dtype=np.float64)
    p = patch_size
    for o in origins:
        coverage[o[0]:o[0] + p, o[1]:o[1] + p, o[2]:o[2] + p] += taper
    return PatchGrid(tuple(int(n) for n in shape), patch_size, stride, origins, taper, coverage)


def extract_patches(v: Volume | np.ndarray, patch_size: int, stride: int,
                    divisor: int = 1) -> tuple[np.ndarray, PatchGrid]:
    """Return patches stacked as (N, P, P, P) together with their grid."""
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    grid = make_grid(data.shape, patch_size, stride, divisor)
    patches = np.stack([data[grid.slices(i)] for i in range(len(grid.origins))])
    return patches.astype(np.float32), grid


def stitch_patches(patches, grid: PatchGrid, spacing: float = 1.0) -> Volume:
    patches = np.asarray(patches)
    p = grid.patch_size
    if patches.shape != (len(grid.origins), p, p, p):
        raise ValueError(f"patches of shape {patches.shape} do not match grid "
                         f"({len(grid.origins)} patches of {p}^3)")
    acc = np.zeros(grid.volume_shape, dtype=np.float64)
    for i in range(len(grid.origins)):
        acc[grid.slices(i)] += patches[i] * grid.taper
    return Volume(acc / grid.coverage, spacing)
