"""Single-volume self-supervised training and patch-wise inference."""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .autograd.optim import AdamState, adam_step
from .autograd.tensor import Tensor, no_grad
from .bsn.checkpoint import Checkpoint
from .bsn.network import Network, build_network
from .bsn.spec import NetworkSpec
from .filters import bilateral3d, gaussian3d
from .losses import TERMS, LossWeights, combine, loss_terms
from .volgrid import Volume, denormalize, extract_patches, normalize, stitch_patches


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 36
    stride: int = 0                 # 0 means patch_size // 2
    batch_size: int = 2
    epochs: int = 15
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    val_fraction: float = 0.2
    w_rec: float = 0.8
    w_guide: float = 0.5
    w_edge: float = 0.05
    w_tv: float = 0.01
    gaussian_sigma: float = 2.0
    bilateral_sigma_s: float = 2.0
    bilateral_sigma_r: float = 0.1
    normalization: str = "percentile"
    seed: int = 0
    base_channels: int = 16
    levels: int = 2
    attention: bool = True
    block: str = "dca"
    downsample: str = "strided"
    infer_stride: int = 0           # 0 means patch_size // 2

    def __post_init__(self):
        spec = self.network_spec()
        if self.patch_size % spec.divisor:
            raise ValueError(f"patch_size {self.patch_size} not divisible by v^L = {spec.divisor}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.epochs < 0 or self.stride < 0 or self.infer_stride < 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and strides >= 0 required")
        if self.normalization not in ("percentile", "zscore"):
            raise ValueError(f"unknown normalization {self.normalization!r}")
        self.weights()

    @property
    def train_stride(self) -> int:
        return self.stride or self.patch_size // 2

    @property
    def inference_stride(self) -> int:
        return self.infer_stride or self.patch_size // 2

    def weights(self) -> LossWeights:
        return LossWeights(self.w_rec, self.w_guide, self.w_edge, self.w_tv)

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(base_channels=self.base_channels, levels=self.levels,
                           attention=self.attention, block=self.block, downsample=self.downsample)

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        typ = types[key] if isinstance(types[key], str) else types[key].__name__
        if typ == "bool":
            if raw.lower() not in ("on", "off", "true", "false", "1", "0"):
                raise ValueError(f"config line {lineno}: {key} expects on/off")
            values[key] = raw.lower() in ("on", "true", "1")
        elif typ == "int":
            values[key] = int(raw)
        elif typ == "float":
            values[key] = float(raw)
        else:
            values[key] = raw
    return (base or TrainConfig()).replace(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# --------------------------------------------------------------------------
# log
# --------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = (["epoch", "train_loss", "val_loss"] + [f"train_{t}" for t in TERMS]
               + [f"val_{t}" for t in TERMS] + ["steps", "wall_s"])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]) for k in self.COLUMNS})


@dataclass
class TrainResult:
    network: Network
    checkpoint: Checkpoint
    log: TrainLog
    best_epoch: int
    train_origins: list
    val_origins: list


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _as_batch(arr: np.ndarray, idx) -> np.ndarray:
    return arr[np.asarray(idx)][:, None]


def _terms_float(terms) -> dict[str, float]:
    return {k: (0.0 if t is None else float(t.data)) for k, t in terms.items()}


def prepare_targets(x: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian and bilateral guidance volumes, computed once on the whole volume."""
    vf = gaussian3d(x, cfg.gaussian_sigma)
    vb = bilateral3d(x, cfg.bilateral_sigma_s, cfg.bilateral_sigma_r) if cfg.w_edge > 0 else x
    return np.asarray(vf, dtype=np.float32), np.asarray(vb, dtype=np.float32)


def split_patches(n: int, val_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    n_val = max(1, int(round(val_fraction * n)))
    perm = rng.permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def train(noisy: Volume, cfg: TrainConfig, progress=None) -> TrainResult:
    seq = np.random.SeedSequence(cfg.seed)
    init_seed, data_seed = (int(s) for s in seq.generate_state(2))
    rng = np.random.default_rng(data_seed)

    normed, _ = normalize(noisy, cfg.normalization)
    x = normed.data
    spec = cfg.network_spec()
    patches, grid = extract_patches(x, cfg.patch_size, cfg.train_stride, spec.divisor)
    if len(patches) < 5:
        raise TrainingError(f"only {len(patches)} patches of {cfg.patch_size}^3 fit; need at least 5")
    vf, vb = prepare_targets(x, cfg)
    pf, _ = extract_patches(vf, cfg.patch_size, cfg.train_stride, spec.divisor)
    pb, _ = extract_patches(vb, cfg.patch_size, cfg.train_stride, spec.divisor)
    train_idx, val_idx = split_patches(len(patches), cfg.val_fraction, rng)

    net = build_network(spec, init_seed, require_blind_spot=spec.downsample != "maxpool")
    # start from the constant prediction "data mean": Adam moves each parameter
    # by about lr per step, too slowly to undo an O(1) random output layer
    net.params["head.conv2.weight"].data[:] = 0
    net.params["head.conv2.bias"].data[:] = np.float32(x.mean())
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    weights = cfg.weights()

    def evaluate(idx):
        sums = dict.fromkeys(TERMS, 0.0)
        total = 0.0
        with no_grad():
            for b in _batches(idx, cfg.batch_size):
                pred = net(_as_batch(patches, b))
                terms = loss_terms(pred, _as_batch(patches, b), _as_batch(pf, b), _as_batch(pb, b), weights)
                loss = combine(terms, weights)
                for k, v in _terms_float(terms).items():
                    sums[k] += v * len(b)
                total += float(loss.data) * len(b)
        return total / len(idx), {k: v / len(idx) for k, v in sums.items()}

    log = TrainLog()
    best_loss, best_epoch, best_state = np.inf, 0, net.state()
    step = 0
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_idx)
        tr_sum, tr_terms = 0.0, dict.fromkeys(TERMS, 0.0)
        for b in _batches(order, cfg.batch_size):
            net.zero_grad()
            pred = net(Tensor(_as_batch(patches, b)))
            terms = loss_terms(pred, _as_batch(patches, b), _as_batch(pf, b), _as_batch(pb, b), weights)
            for name, t in terms.items():
                if t is not None and not np.isfinite(t.data):
                    raise TrainingError(f"non-finite {name} loss at epoch {epoch}, step {step}")
            loss = combine(terms, weights)
            loss.backward()
            adam_step(net.params, opt)
            step += 1
            tr_sum += float(loss.data) * len(b)
            for k, v in _terms_float(terms).items():
                tr_terms[k] += v * len(b)
        val_loss, val_terms = evaluate(val_idx)
        if not np.isfinite(val_loss):
            bad = [k for k, v in val_terms.items() if not np.isfinite(v)]
            raise TrainingError(f"non-finite validation loss ({', '.join(bad) or 'total'}) at epoch {epoch}")
        row = {"epoch": epoch, "train_loss": tr_sum / len(train_idx), "val_loss": val_loss}
        row.update({f"train_{k}": v / len(train_idx) for k, v in tr_terms.items()})
        row.update({f"val_{k}": v for k, v in val_terms.items()})
        row.update({"steps": step, "wall_s": time.perf_counter() - start})
        log.rows.append(row)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, net.state()
        if progress is not None:
            progress(row)

    ckpt = Checkpoint(spec, best_state, step, cfg.seed)
    return TrainResult(ckpt.network(), ckpt, log, best_epoch,
                       [grid.origins[i] for i in train_idx], [grid.origins[i] for i in val_idx])


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------


def denoise_volume(net: Network, noisy: Volume, patch_size: int = 36, stride: int | None = None,
                   normalization: str = "percentile", batch_size: int = 2, workers: int = 1) -> Volume:
    """Normalize, run the network patch by patch, blend with a cosine taper, invert.

    ``workers`` threads process disjoint patch batches; each batch's result
    is computed identically whichever thread runs it, so the output does not
    depend on ``workers``.
    """
    stride = stride or patch_size // 2
    normed, rec = normalize(noisy, normalization)
    patches, grid = extract_patches(normed, patch_size, stride, net.spec.divisor)
    out = np.empty_like(patches)

    def run(b):
        with no_grad():
            out[b[0]:b[-1] + 1] = net(patches[b[0]:b[-1] + 1][:, None]).data[:, 0]

    batches = list(_batches(list(range(len(patches))), batch_size))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, batches))
    else:
        for b in batches:
            run(b)
    return denormalize(stitch_patches(out, grid, noisy.spacing), rec)
