"""Declarative description of the U-shaped blind-spot network.

A :class:`NetworkSpec` holds the hyperparameters; :meth:`NetworkSpec.graph`
expands them into a flat list of :class:`Node` objects that both the
network builder and the static J-invariance analysis consume, so the
analysed graph is exactly the executed one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

DOWNSAMPLE_MODES = ("strided", "block", "maxpool")
BLOCK_KINDS = ("dca", "dbsn")
NORM_MODES = ("channel", "sample")


@dataclass(frozen=True)
class Node:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int = 1
    base_channels: int = 32
    levels: int = 2
    shuffle: int = 3
    mask_kernel: int = 5
    mask_center: int = 3
    first_dilation: int = 1
    enc_blocks: int = 2
    mid_blocks: int = 2
    dec_blocks: int = 0
    block: str = "dca"
    dca_dilation: int = 3
    expand: int = 2
    attention: bool = True
    downsample: str = "strided"
    norm: str = "channel"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("in_channels", "base_channels", "shuffle", "mask_kernel", "first_dilation",
                     "dca_dilation", "expand"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("levels", "enc_blocks", "mid_blocks", "dec_blocks", "mask_center"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mask_kernel % 2 == 0:
            raise ValueError("mask_kernel must be odd")
        if self.mask_center and (self.mask_center % 2 == 0 or self.mask_center >= self.mask_kernel):
            raise ValueError("mask_center must be odd and smaller than mask_kernel (0 = unmasked)")
        if self.downsample not in DOWNSAMPLE_MODES:
            raise ValueError(f"downsample must be one of {DOWNSAMPLE_MODES}, got {self.downsample!r}")
        if self.block not in BLOCK_KINDS:
            raise ValueError(f"block must be one of {BLOCK_KINDS}, got {self.block!r}")
        if self.norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {self.norm!r}")

    # ------------------------------------------------------------------
    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def divisor(self) -> int:
        """Patch edge lengths must be multiples of this."""
        return self.shuffle ** self.levels

    def replace(self, **changes) -> "NetworkSpec":
        return NetworkSpec(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(asdict(self).items()))

    @classmethod
    def from_text(cls, text: str) -> "NetworkSpec":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in types:
                raise ValueError(f"unknown network spec key {key!r}")
            values[key] = _parse(raw.strip(), types[key])
        return cls(**values)

    # ------------------------------------------------------------------
    def graph(self) -> list[Node]:
        g = _GraphBuilder()
        v = self.shuffle
        x = g.add("input", "input", (), channels=self.in_channels)
        feat = g.conv("first", x, self.in_channels, self.width(0), self.mask_kernel,
                      dilation=self.first_dilation, mask_center=self.mask_center)
        skips = []
        for lvl in range(self.levels):
            c = self.width(lvl)
            for i in range(self.enc_blocks):
                feat = self._block(g, f"enc{lvl}.b{i}", feat, c)
            skips.append(feat)
            if self.downsample == "maxpool":
                feat = g.add(f"down{lvl}.pad", "pad_to", (feat,), multiple=v)
                feat = g.add(f"down{lvl}.pool", "maxpool", (feat,), v=v)
                feat = g.conv(f"down{lvl}.proj", feat, c, self.width(lvl + 1), 1)
            else:
                multiple = v * v if self.downsample == "strided" else v
                feat = g.add(f"down{lvl}.pad", "pad_to", (feat,), multiple=multiple)
                feat = g.add(f"down{lvl}.unshuffle", "unshuffle", (feat,), v=v, mode=self.downsample)
                feat = g.conv(f"down{lvl}.proj", feat, c * v ** 3, self.width(lvl + 1), 1)
        for i in range(self.mid_blocks):
            feat = self._block(g, f"mid.b{i}", feat, self.width(self.levels))
        for lvl in reversed(range(self.levels)):
            c = self.width(lvl)
            if self.downsample == "maxpool":
                feat = g.add(f"up{lvl}.interp", "upsample", (feat,), v=v)
                feat = g.conv(f"up{lvl}.proj", feat, self.width(lvl + 1), c, 1)
            else:
                feat = g.conv(f"up{lvl}.proj", feat, self.width(lvl + 1), c * v ** 3, 1)
                feat = g.add(f"up{lvl}.shuffle", "shuffle", (feat,), v=v, mode=self.downsample)
            feat = g.add(f"up{lvl}.crop", "crop_like", (feat, skips[lvl]))
            feat = g.add(f"up{lvl}.cat", "concat", (feat, skips[lvl]))
            feat = g.conv(f"up{lvl}.merge", feat, 2 * c, c, 1)
            for i in range(self.dec_blocks):
                feat = self._block(g, f"dec{lvl}.b{i}", feat, c)
        c0 = self.width(0)
        feat = g.conv("head.conv1", feat, c0, 2 * c0, 1)
        feat = g.add("head.gate", "simple_gate", (feat,))
        g.conv("head.conv2", feat, c0, self.in_channels, 1)
        return g.nodes

    def _block(self, g: "_GraphBuilder", prefix: str, x: str, c: int) -> str:
        d = self.dca_dilation
        if self.block == "dbsn":
            h = g.conv(f"{prefix}.dconv", x, c, c, 3, dilation=d)
            h = g.add(f"{prefix}.act", "relu", (h,))
            h = g.conv(f"{prefix}.proj", h, c, c, 1)
            return g.add(f"{prefix}.res", "add", (x, h))
        e = self.expand * c
        h = g.add(f"{prefix}.norm1", "layer_norm", (x,), channels=c, mode=self.norm)
        h = g.conv(f"{prefix}.expand1", h, c, e, 1)
        h = g.conv(f"{prefix}.dwconv", h, e, e, 3, dilation=d, groups=e)
        h = g.add(f"{prefix}.gate1", "simple_gate", (h,))
        h = g.add(f"{prefix}.sca", "sca", (h,), channels=e // 2, enabled=self.attention)
        h = g.conv(f"{prefix}.proj1", h, e // 2, c, 1)
        y = g.add(f"{prefix}.res1", "add", (x, h))
        h = g.add(f"{prefix}.norm2", "layer_norm", (y,), channels=c, mode=self.norm)
        h = g.conv(f"{prefix}.expand2", h, c, e, 1)
        h = g.add(f"{prefix}.gate2", "simple_gate", (h,))
        h = g.conv(f"{prefix}.proj2", h, e // 2, c, 1)
        return g.add(f"{prefix}.res2", "add", (y, h))


class _GraphBuilder:
    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, name, op, inputs, **attrs) -> str:
        self.nodes.append(Node(name, op, tuple(inputs), attrs))
        return name

    def conv(self, name, x, cin, cout, k, dilation=1, groups=1, mask_center=0) -> str:
        return self.add(name, "conv", (x,), cin=cin, cout=cout, k=k, dilation=dilation,
                        groups=groups, mask_center=mask_center)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return str(v)


def _parse(raw: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if raw.lower() in ("on", "true", "1", "yes"):
            return True
        if raw.lower() in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"expected on/off, got {raw!r}")
    if typ == "int":
        return int(raw)
    return raw


def parameter_shapes(spec: NetworkSpec) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor of the network, in graph order."""
    shapes = {}
    for node in spec.graph():
        a = node.attrs
        if node.op == "conv":
            shapes[f"{node.name}.weight"] = (a["cout"], a["cin"] // a["groups"], a["k"], a["k"], a["k"])
            shapes[f"{node.name}.bias"] = (a["cout"],)
        elif node.op == "layer_norm":
            shapes[f"{node.name}.gamma"] = (a["channels"],)
            shapes[f"{node.name}.beta"] = (a["channels"],)
        elif node.op == "sca":
            shapes[f"{node.name}.weight"] = (a["channels"], a["channels"])
            shapes[f"{node.name}.bias"] = (a["channels"],)
    return shapes


def analytic_parameter_count(spec: NetworkSpec) -> int:
    """Closed-form learnable parameter count (masked first-layer taps excluded).

    With C_l = b * 2^l, e = expand, n_l = v^3 C_l, a DCA block of width C has
    C(2 + 2)                           two LayerNorms
    + 2 (C e + e)                      two expansions
    + 27 e + e                         depthwise conv
    + (e/2)^2 + e/2                    channel attention
    + 2 (e/2 C + C)                    two projections
    and a D-BSN block 27 C^2 + C + C^2 + C.  The rest of the graph adds the
    masked first conv (active taps * in * C_0 + C_0), per level a down
    projection (n_l C_{l+1} + C_{l+1}), an up projection (C_{l+1} n_l + n_l),
    a merge (2 C_l C_l + C_l), and the head (2 C_0^2 + 2 C_0 + C_0 in + in).
    The maxpool variant replaces n_l by C_l.
    """
    v, e_mult = spec.shuffle, spec.expand
    k, c = spec.mask_kernel, spec.mask_center
    taps = k ** 3 - c ** 3

    def block(cw):
        if spec.block == "dbsn":
            return 27 * cw * cw + cw + cw * cw + cw
        e = e_mult * cw
        h = e // 2
        return 4 * cw + 2 * (cw * e + e) + 27 * e + e + h * h + h + 2 * (h * cw + cw)

    c0, cin = spec.width(0), spec.in_channels
    total = taps * cin * c0 + c0
    for lvl in range(spec.levels):
        cl, cn = spec.width(lvl), spec.width(lvl + 1)
        nl = cl if spec.downsample == "maxpool" else cl * v ** 3
        total += spec.enc_blocks * block(cl) + spec.dec_blocks * block(cl)
        total += nl * cn + cn          # down projection
        total += cn * nl + nl          # up projection
        total += 2 * cl * cl + cl      # skip merge
    total += spec.mid_blocks * block(spec.width(spec.levels))
    total += c0 * 2 * c0 + 2 * c0 + c0 * cin + cin
    return total
