"""Instantiate and run the node graph produced by :meth:`NetworkSpec.graph`."""

from __future__ import annotations

import numpy as np

from .. import shuffle as shuf
from ..autograd import layers as L
from ..autograd.tensor import Tensor, as_tensor, concat, crop_start, pad_end, relu
from .spec import NetworkSpec, parameter_shapes


class BlindSpotError(ValueError):
    """Raised when a spec would let an output voxel see its own input."""


class Network:
    """A NetworkSpec together with one tensor per learnable parameter."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor]):
        expected = parameter_shapes(spec)
        missing = [k for k in expected if k not in params]
        if missing:
            raise KeyError(f"missing parameter {missing[0]!r}")
        extra = [k for k in params if k not in expected]
        if extra:
            raise KeyError(f"unexpected parameter {extra[0]!r}")
        for k, shape in expected.items():
            if tuple(params[k].shape) != shape:
                raise ValueError(f"shape mismatch for {k!r}: expected {shape}, got {params[k].shape}")
        self.spec = spec
        self.params = {k: params[k] for k in expected}
        self.nodes = spec.graph()
        self.masks = {n.name: L.central_mask(n.attrs["k"], n.attrs["mask_center"])
                      for n in self.nodes if n.op == "conv" and n.attrs["mask_center"]}
        self._last_use = {}
        for i, n in enumerate(self.nodes):
            for src in n.inputs:
                self._last_use[src] = i
        for name, mask in self.masks.items():
            w = self.params[f"{name}.weight"]
            w.data *= mask  # masked taps are structurally zero

    @property
    def parameter_count(self) -> int:
        """Learnable scalars; masked first-layer taps are not counted."""
        total = 0
        for k, t in self.params.items():
            node = k.rsplit(".", 1)[0]
            if k.endswith(".weight") and node in self.masks:
                total += int(self.masks[node].sum()) * t.shape[0] * t.shape[1]
            else:
                total += t.data.size
        return total

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def check_input(self, shape):
        if len(shape) != 5 or shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (B, {self.spec.in_channels}, D, H, W) input, got {shape}")
        div = self.spec.divisor
        for axis, n in zip("DHW", shape[2:]):
            if n % div:
                raise ValueError(f"spatial axis {axis} has size {n}, not divisible by {div}")

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        self.check_input(x.shape)
        p = self.params
        vals: dict[str, Tensor] = {}
        out = None
        for i, n in enumerate(self.nodes):
            a = n.attrs
            ins = [vals[s] for s in n.inputs]
            if n.op == "input":
                out = x
            elif n.op == "conv":
                out = L.conv3d(ins[0], p[f"{n.name}.weight"], p[f"{n.name}.bias"],
                               dilation=a["dilation"], groups=a["groups"], mask=self.masks.get(n.name))
            elif n.op == "layer_norm":
                out = L.layer_norm(ins[0], p[f"{n.name}.gamma"], p[f"{n.name}.beta"], mode=a["mode"])
            elif n.op == "simple_gate":
                out = L.simple_gate(ins[0])
            elif n.op == "sca":
                out = L.channel_attention(ins[0], p[f"{n.name}.weight"], p[f"{n.name}.bias"],
                                          enabled=a["enabled"])
            elif n.op == "relu":
                out = relu(ins[0])
            elif n.op == "add":
                out = ins[0] + ins[1]
            elif n.op == "concat":
                out = concat(ins, axis=1)
            elif n.op == "pad_to":
                m = a["multiple"]
                out = pad_end(ins[0], tuple(-(-s // m) * m for s in ins[0].shape[2:]))
            elif n.op == "crop_like":
                out = crop_start(ins[0], ins[1].shape[2:])
            elif n.op == "unshuffle":
                out = shuf.UNSHUFFLE[a["mode"]](ins[0], a["v"])
            elif n.op == "shuffle":
                out = shuf.SHUFFLE[a["mode"]](ins[0], a["v"])
            elif n.op == "maxpool":
                out = L.max_pool3d(ins[0], a["v"])
            elif n.op == "upsample":
                out = L.upsample_linear(ins[0], a["v"])
            else:
                raise ValueError(f"unknown node op {n.op!r}")
            vals[n.name] = out
            for s in n.inputs:
                if self._last_use[s] == i:
                    del vals[s]
        return out

    __call__ = forward

    def astype(self, dtype) -> "Network":
        """Copy with every parameter cast to ``dtype`` (float64 for gradient checks)."""
        params = {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=k)
                  for k, t in self.params.items()}
        return Network(self.spec, params)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}


def init_parameters(spec: NetworkSpec, seed: int) -> dict[str, Tensor]:
    """Fan-in uniform weights, unit LayerNorm gains, zero biases.

    The bound is ``gain * sqrt(3 / fan_in)`` with the He gain sqrt(2) for
    layers feeding a ReLU and gain 1 for layers feeding linear or gated
    paths, so activation scale stays O(1) through the gated head.
    """
    rng = np.random.default_rng(seed)
    params = {}
    graph = spec.graph()
    nodes = {n.name: n for n in graph}
    feeds_relu = {s for n in graph if n.op == "relu" for s in n.inputs}
    for key, shape in parameter_shapes(spec).items():
        node_name, kind = key.rsplit(".", 1)
        node = nodes[node_name]
        if kind == "weight":
            if node.op == "conv":
                k, mc = node.attrs["k"], node.attrs["mask_center"]
                fan_in = shape[1] * (k ** 3 - mc ** 3)
            else:
                fan_in = shape[1]
            gain = 2.0 if node_name in feeds_relu else 1.0
            bound = np.sqrt(3.0 * gain / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "gamma":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[key] = Tensor(data.astype(np.float32), requires_grad=True, name=key)
    return params


def build_network(spec: NetworkSpec, seed: int = 0, require_blind_spot: bool = True) -> Network:
    """Build and initialize; refuses specs whose static footprint reaches offset 0.

    ``require_blind_spot=False`` exists for ablations and counterexamples.
    """
    if require_blind_spot:
        from ..jinv import static_footprint

        report = static_footprint(spec)
        if report.verdict == "violated":
            raise BlindSpotError(
                "spec is not J-invariant: an output voxel can read its own input through "
                f"{report.explanation}")
    return Network(spec, init_parameters(spec, seed))
