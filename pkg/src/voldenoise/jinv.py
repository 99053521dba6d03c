"""J-invariance checks: static offset-set analysis of a NetworkSpec graph and
an empirical single-voxel perturbation test of an instantiated network.

Static analysis
---------------
Every node of the graph is translation-equivariant on its own grid.  A node at
resolution level l has positions s whose anchor in the original grid is
phi_l(s).  Its footprint F is the set of original-grid offsets o such that
output position s may read input voxel phi_l(s) + o.  Footprints compose by
Minkowski sums; a convolution tap t on level l contributes lift_l(t), the set
of original offsets between the anchors of two level-l positions t apart.

For contiguous-block downsampling phi(s) = v*s and lift(t) = {v*t}.  For the
strided unshuffle phi(s) = v^2 * (s // v) + s % v, and lift(t) is the small
set {v^2 * da + dc} with dc in (-v, v), dc = t (mod v), da = (t - dc) / v.
Nodes with unbounded support (channel attention, sample-wide LayerNorm)
raise the ``global`` flag.  The verdict is

* ``violated`` when 0 is in F (the output may copy its own input),
* ``bounded-leak`` when 0 is not in F but a global node is present,
* ``exact`` otherwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .autograd.layers import central_mask, linear_upsample_matrix
from .autograd.tensor import no_grad
from .bsn.spec import NetworkSpec, Node


# --------------------------------------------------------------------------
# offset sets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OffsetSet:
    """Finite set of integer 3-vectors stored as a boolean occupancy grid."""

    origin: tuple[int, int, int]
    grid: np.ndarray = field(repr=False)
    is_global: bool = False

    @classmethod
    def from_offsets(cls, offsets, is_global: bool = False) -> "OffsetSet":
        pts = np.asarray(offsets, dtype=np.int64).reshape(-1, 3)
        if len(pts) == 0:
            return cls((0, 0, 0), np.zeros((0, 0, 0), dtype=bool), is_global)
        lo = pts.min(axis=0)
        grid = np.zeros(tuple(pts.max(axis=0) - lo + 1), dtype=bool)
        grid[tuple((pts - lo).T)] = True
        return cls(tuple(int(i) for i in lo), grid, is_global)

    @classmethod
    def zero(cls) -> "OffsetSet":
        return cls.from_offsets([(0, 0, 0)])

    def offsets(self) -> np.ndarray:
        return np.argwhere(self.grid) + np.asarray(self.origin)

    def __len__(self) -> int:
        return int(self.grid.sum())

    def __contains__(self, o) -> bool:
        idx = np.asarray(o) - np.asarray(self.origin)
        if np.any(idx < 0) or np.any(idx >= self.grid.shape):
            return False
        return bool(self.grid[tuple(idx)])

    def minkowski(self, taps) -> "OffsetSet":
        """{f + t : f in self, t in taps}."""
        taps = np.asarray(taps, dtype=np.int64).reshape(-1, 3)
        if len(self) == 0 or len(taps) == 0:
            return OffsetSet.from_offsets([], self.is_global)
        tlo, thi = taps.min(axis=0), taps.max(axis=0)
        shape = tuple(np.asarray(self.grid.shape) + thi - tlo)
        out = np.zeros(shape, dtype=bool)
        n = self.grid.shape
        for t in taps - tlo:
            out[t[0]:t[0] + n[0], t[1]:t[1] + n[1], t[2]:t[2] + n[2]] |= self.grid
        origin = tuple(int(a + b) for a, b in zip(self.origin, tlo))
        return OffsetSet(origin, out, self.is_global)

    def union(self, other: "OffsetSet") -> "OffsetSet":
        pts = np.concatenate([self.offsets(), other.offsets()])
        return OffsetSet.from_offsets(pts, self.is_global or other.is_global)

    def with_global(self) -> "OffsetSet":
        return OffsetSet(self.origin, self.grid, True)

    def issubset(self, other: "OffsetSet") -> bool:
        return all(o in other for o in self.offsets())


# --------------------------------------------------------------------------
# level geometry
# --------------------------------------------------------------------------


def _lift_axis(o: int, kind: str, v: int) -> list[int]:
    if kind == "scale":
        return [v * o]
    r = o % v
    choices = [0] if r == 0 else [r, r - v]
    return [v * v * ((o - dc) // v) + dc for dc in choices]


def lift(offsets, geometry) -> np.ndarray:
    """Map level-l offsets to original-grid offsets through ``geometry``,
    a tuple of (kind, v) steps from level 0 down to level l."""
    pts = [tuple(int(i) for i in p) for p in np.asarray(offsets, dtype=np.int64).reshape(-1, 3)]
    for kind, v in reversed(geometry):
        nxt = set()
        for p in pts:
            axes = [_lift_axis(c, kind, v) for c in p]
            nxt.update(itertools.product(*axes))
        pts = sorted(nxt)
    return np.asarray(pts, dtype=np.int64).reshape(-1, 3)


def _cube(lo: int, hi: int) -> np.ndarray:
    r = range(lo, hi)
    return np.asarray(list(itertools.product(r, r, r)), dtype=np.int64)


def _conv_taps(a: dict) -> np.ndarray:
    k, d, c = a["k"], a["dilation"], a["mask_center"]
    mask = central_mask(k, c)
    return (np.argwhere(mask) - k // 2) * d


def _unshuffle_offsets(mode: str, v: int) -> np.ndarray:
    if mode == "strided":
        return _cube(0, v) * v
    return _cube(0, v)


def _upsample_offsets(v: int) -> np.ndarray:
    # relation {v*s - p : output p reads coarse s}, taken from an interior row
    n = 8
    m = linear_upsample_matrix(n, v)
    rel = sorted({v * s - p for p in range(2 * v, (n - 2) * v) for s in np.nonzero(m[p])[0]})
    return np.asarray(list(itertools.product(rel, rel, rel)), dtype=np.int64)


# --------------------------------------------------------------------------
# static analysis
# --------------------------------------------------------------------------


@dataclass
class StaticReport:
    verdict: str
    footprint: OffsetSet
    zero_reachable: bool
    global_nodes: list[str]
    explanation: str
    blind_near: np.ndarray  # offsets with |o|_inf <= radius that no output reads
    radius: int = 3

    def lines(self) -> list[str]:
        return [
            f"static_verdict={self.verdict}",
            f"zero_reachable={int(self.zero_reachable)}",
            f"footprint_size={len(self.footprint)}",
            f"global_nodes={len(self.global_nodes)}",
            f"blind_offsets_within_{self.radius}={len(self.blind_near)}",
        ]


def static_footprint(spec: NetworkSpec | list[Node], radius: int = 3) -> StaticReport:
    nodes = spec.graph() if isinstance(spec, NetworkSpec) else list(spec)
    fp: dict[str, OffsetSet] = {}
    geo: dict[str, tuple] = {}
    first_hit: str | None = None
    global_nodes: list[str] = []
    for n in nodes:
        a = n.attrs
        if n.op == "input":
            f, g = OffsetSet.zero(), ()
        else:
            if not n.inputs:
                raise ValueError(f"node {n.name!r} ({n.op}) has no inputs")
            f, g = fp[n.inputs[0]], geo[n.inputs[0]]
            if n.op == "conv":
                f = f.minkowski(lift(_conv_taps(a), g))
            elif n.op in ("simple_gate", "relu", "pad_to", "crop_like"):
                pass
            elif n.op == "layer_norm":
                if a["mode"] == "sample":
                    f = f.with_global()
                    global_nodes.append(n.name)
                elif a["mode"] != "channel":
                    raise ValueError(f"unknown layer_norm mode {a['mode']!r}")
            elif n.op == "sca":
                if a["enabled"]:
                    f = f.with_global()
                    global_nodes.append(n.name)
            elif n.op in ("add", "concat"):
                for other in n.inputs[1:]:
                    if geo[other] != g:
                        raise ValueError(f"node {n.name!r} merges inputs at different resolutions")
                    f = f.union(fp[other])
            elif n.op == "unshuffle":
                f = f.minkowski(lift(_unshuffle_offsets(a["mode"], a["v"]), g))
                g = g + (("strided" if a["mode"] == "strided" else "scale", a["v"]),)
            elif n.op == "maxpool":
                f = f.minkowski(lift(_cube(0, a["v"]), g))
                g = g + (("scale", a["v"]),)
            elif n.op == "shuffle":
                kind = "strided" if a["mode"] == "strided" else "scale"
                if not g or g[-1] != (kind, a["v"]):
                    raise ValueError(f"node {n.name!r} does not match the pending downsampling")
                g = g[:-1]
                f = f.minkowski(lift(-_unshuffle_offsets(a["mode"], a["v"]), g))
            elif n.op == "upsample":
                if not g or g[-1] != ("scale", a["v"]):
                    raise ValueError(f"node {n.name!r} does not match the pending downsampling")
                g = g[:-1]
                f = f.minkowski(lift(_upsample_offsets(a["v"]), g))
            else:
                raise ValueError(f"unknown layer kind {n.op!r} in node {n.name!r}")
        fp[n.name], geo[n.name] = f, g
        if first_hit is None and n.op != "input" and (0, 0, 0) in f:
            first_hit = f"{n.name} ({n.op})"
    out = fp[nodes[-1].name]
    zero = (0, 0, 0) in out
    if zero:
        verdict = "violated"
        explanation = f"offset 0 first becomes reachable at node {first_hit}"
    elif out.is_global:
        verdict = "bounded-leak"
        explanation = f"offset 0 unreachable; global statistics at {', '.join(global_nodes)}"
    else:
        verdict = "exact"
        explanation = "offset 0 unreachable and no global statistics"
    near = _cube(-radius, radius + 1)
    blind = np.asarray([o for o in near if tuple(o) not in out], dtype=np.int64).reshape(-1, 3)
    return StaticReport(verdict, out, zero, global_nodes, explanation, blind, radius)


# --------------------------------------------------------------------------
# empirical perturbation test
# --------------------------------------------------------------------------


@dataclass
class JinvReport:
    verdict: str
    max_self_dependence: float
    delta: float
    bound: float | None
    mode: str
    samples: list[tuple[tuple[int, int, int], float]]
    static: StaticReport | None = None

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def to_text(self) -> str:
        head = [
            f"J-invariance report ({self.mode})",
            f"  samples: {self.n_samples}",
            f"  delta: {self.delta:.6g}",
            f"  max self-dependence: {self.max_self_dependence:.6g}",
        ]
        if self.bound is not None:
            head.append(f"  bound: {self.bound:.6g}")
        if self.static is not None:
            head.append(f"  static: {self.static.verdict} ({self.static.explanation})")
        head.append(f"  verdict: {self.verdict}")
        kv = [
            f"verdict={self.verdict}",
            f"mode={self.mode}",
            f"samples={self.n_samples}",
            f"delta={self.delta:.9g}",
            f"max_self_dependence={self.max_self_dependence:.9g}",
        ]
        if self.bound is not None:
            kv.append(f"bound={self.bound:.9g}")
        if self.static is not None:
            kv += self.static.lines()
        return "\n".join(head + kv) + "\n"


def perturbation_test(net, shape=(27, 27, 27), n_samples: int = 200, delta: float | None = None,
                      mode: str = "strict", seed: int = 0, beta: float = 100.0,
                      batch: int = 8) -> JinvReport:
    """Measure |f(x + delta e_j)_j - f(x)_j| at ``n_samples`` random voxels j.

    ``net`` is any callable mapping (B, 1, D, H, W) arrays to Tensors or
    arrays.  Each batch carries the clean input in slot 0 as its reference so
    that every comparison runs through identical arithmetic.
    """
    if mode not in ("strict", "statistical"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1) + tuple(shape)).astype(np.float32)
    if delta is None:
        delta = 10.0 * float(x.std())
    n_vox = int(np.prod(shape))
    flat = rng.choice(n_vox, size=min(n_samples, n_vox), replace=False)
    idx = [tuple(int(i) for i in np.unravel_index(f, shape)) for f in flat]
    per = max(1, batch - 1)
    samples = []
    with no_grad():
        for start in range(0, len(idx), per):
            chunk = idx[start:start + per]
            xb = np.repeat(x, len(chunk) + 1, axis=0)
            for k, j in enumerate(chunk, start=1):
                xb[(k, 0) + j] += np.float32(delta)
            y = net(xb)
            y = np.asarray(getattr(y, "data", y))
            for k, j in enumerate(chunk, start=1):
                samples.append((j, float(abs(float(y[(k, 0) + j]) - float(y[(0, 0) + j])))))
    peak = max(m for _, m in samples)
    bound = beta * delta / n_vox if mode == "statistical" else None
    if peak == 0.0:
        verdict = "exact"
    elif mode == "statistical" and peak <= bound:
        verdict = "bounded-leak"
    else:
        verdict = "violated"
    static = None
    if hasattr(net, "spec"):
        static = static_footprint(net.spec)
    return JinvReport(verdict, peak, float(delta), bound, mode, samples, static)
