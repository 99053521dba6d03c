"""CVCK checkpoint files.

Layout (little-endian): magic ``CVCK``, u32 version, u64 training step,
i64 seed, u32 spec length, canonical spec text (UTF-8), then one record per
parameter until end of file: u32 name length, name, u32 rank, rank x u32
dims, float32 values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..autograd.tensor import Tensor
from .network import Network
from .spec import NetworkSpec, parameter_shapes

MAGIC = b"CVCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict[str, np.ndarray]
    step: int = 0
    seed: int = 0

    def network(self) -> Network:
        return Network(self.spec, {k: Tensor(v.copy(), requires_grad=True, name=k)
                                   for k, v in self.params.items()})


def save_checkpoint(net: Network, path, step: int = 0, seed: int = 0) -> None:
    spec_text = net.spec.to_text().encode()
    parts = [MAGIC, struct.pack("<IQqI", VERSION, step, seed, len(spec_text)), spec_text]
    for name, t in net.params.items():
        raw = name.encode()
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a CVCK checkpoint")
    try:
        version, step, seed, n_spec = struct.unpack_from("<IQqI", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 4 + struct.calcsize("<IQqI")
        spec = NetworkSpec.from_text(raw[pos:pos + n_spec].decode())
        pos += n_spec
        params = {}
        while pos < len(raw):
            (n_name,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n_name].decode()
            pos += n_name
            (rank,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{rank}I", raw, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(dims))
            if pos + 4 * count > len(raw):
                raise CheckpointError(f"{path}: record {name!r} truncated")
            params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint ({exc})") from None
    expected = parameter_shapes(spec)
    for name, shape in expected.items():
        if name not in params:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: shape mismatch for {name!r}: "
                                  f"spec expects {shape}, file holds {params[name].shape}")
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointError(f"{path}: unexpected parameter {extra[0]!r}")
    return Checkpoint(spec, params, int(step), int(seed))


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Network:
    """Load a network; ``spec`` (optional) must match the stored parameter shapes."""
    ckpt = read_checkpoint(path)
    if spec is not None:
        expected = parameter_shapes(spec)
        for name, shape in expected.items():
            if name not in ckpt.params:
                raise CheckpointError(f"missing parameter {name!r}")
            if ckpt.params[name].shape != shape:
                raise CheckpointError(f"shape mismatch for {name!r}: spec expects {shape}, "
                                      f"checkpoint holds {ckpt.params[name].shape}")
        ckpt.spec = spec
    return ckpt.network()
