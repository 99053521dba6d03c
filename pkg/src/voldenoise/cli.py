"""Command-line entry point: ``voldenoise <command> ...``.

Exit codes: 0 success, 2 usage/validation failure or failed verdict, 1 error.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

ABLATIONS = {
    "dca": {"block": "dbsn"},
    "vus": {"downsample": "maxpool"},
    "loss-edge": {"w_edge": 0.0},
    "loss-guide": {"w_guide": 0.0},
    "loss-tv": {"w_tv": 0.0},
    "loss-all": {"w_guide": 0.0, "w_edge": 0.0, "w_tv": 0.0},
}


class CliError(Exception):
    """Reported as ``error: ...`` with exit code 1."""


def _need_seed(args):
    if args.seed is None:
        raise CliError(f"'{args.command}' draws random numbers and needs an explicit --seed")
    return args.seed


def _dims(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"expected N or D,H,W, got {text!r}")
    return tuple(parts)


def _kv(text: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def _read(path):
    from .volgrid import read_volume

    if not Path(path).is_file():
        raise CliError(f"no such file: {path}")
    return read_volume(path)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .simdata import add_noise, apply_missing_wedge, make_phantom
    from .volgrid import write_cvol

    seed = _need_seed(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s_phantom, s_noise, s_a, s_b = (int(s) for s in np.random.SeedSequence(seed).generate_state(4))
    clean = make_phantom(args.dims, s_phantom, spacing=args.spacing)
    observed = apply_missing_wedge(clean, args.wedge_deg) if args.wedge_deg < 90 else clean
    noise = {"sigma": args.sigma, "lam": args.lam, "weights": tuple(args.mix_weights)}
    files = {
        "clean": clean,
        "noisy": add_noise(observed, args.noise, s_noise, **noise),
        "half_a": add_noise(observed, args.noise, s_a, **noise),
        "half_b": add_noise(observed, args.noise, s_b, **noise),
    }
    lines = [f"seed={seed}", f"dims={','.join(map(str, args.dims))}", f"spacing={args.spacing}",
             f"noise={args.noise}", f"sigma={args.sigma}", f"lambda={args.lam}",
             f"mix_weights={','.join(map(str, args.mix_weights))}", f"wedge_deg={args.wedge_deg}",
             f"seed_phantom={s_phantom}", f"seed_noise={s_noise}", f"seed_half_a={s_a}",
             f"seed_half_b={s_b}"]
    for name, vol in files.items():
        path = out / f"{name}.cvol"
        write_cvol(path, vol)
        lines.append(f"sha256_{name}={_sha256(path)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {', '.join(files)} and manifest.txt to {out}")
    return EXIT_OK


def cmd_filter(args) -> int:
    from . import filters
    from .volgrid import write_cvol

    vol = _read(args.input)
    p = args.params
    if args.method == "gaussian":
        out = filters.gaussian3d(vol, p.get("sigma", 2.0))
    elif args.method == "bilateral":
        out = filters.bilateral3d(vol, p.get("sigma_s", 2.0), p.get("sigma_r", 0.1))
    else:
        out = filters.lowpass(vol, p.get("cutoff", 0.25))
    write_cvol(args.output, out)
    return EXIT_OK


def _train_config(args):
    from .trainer import TrainConfig, load_config

    if args.config and not Path(args.config).is_file():
        raise CliError(f"no such file: {args.config}")
    cfg = load_config(args.config) if args.config else TrainConfig()
    return cfg.replace(seed=_need_seed(args))


def _run_training(args, cfg) -> int:
    from .bsn.checkpoint import save_checkpoint
    from .trainer import train

    vol = _read(args.input)
    res = train(vol, cfg, progress=lambda r: print(
        f"epoch {r['epoch']}: train {r['train_loss']:.6g} val {r['val_loss']:.6g}", flush=True))
    out = Path(args.output)
    save_checkpoint(res.network, out, step=res.checkpoint.step, seed=cfg.seed)
    log = Path(args.log) if args.log else out.with_suffix(".log.csv")
    res.log.write_csv(log)
    out.with_suffix(".config.txt").write_text(cfg.to_text())
    print(f"best epoch {res.best_epoch}; checkpoint {out}; log {log}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _run_training(args, _train_config(args))


def cmd_ablate(args) -> int:
    cfg = _train_config(args).replace(**ABLATIONS[args.component])
    print(f"ablation {args.component}: " + ", ".join(f"{k}={v}" for k, v in ABLATIONS[args.component].items()))
    return _run_training(args, cfg)


def cmd_denoise(args) -> int:
    from .bsn.checkpoint import load_checkpoint
    from .trainer import denoise_volume
    from .volgrid import write_cvol

    if not Path(args.ckpt).is_file():
        raise CliError(f"no such file: {args.ckpt}")
    net = load_checkpoint(args.ckpt)
    vol = _read(args.input)
    write_cvol(args.output, denoise_volume(net, vol, args.patch, args.stride or None, workers=args.threads))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .bsn.checkpoint import load_checkpoint
    from .bsn.network import build_network
    from .bsn.spec import NetworkSpec
    from .jinv import perturbation_test

    seed = _need_seed(args)
    if args.ckpt:
        if not Path(args.ckpt).is_file():
            raise CliError(f"no such file: {args.ckpt}")
        net = load_checkpoint(args.ckpt)
        if args.attention is not None:
            net.spec = net.spec.replace(attention=args.attention == "on")
            net.nodes = net.spec.graph()
    else:
        spec = NetworkSpec()
        if args.spec:
            if not Path(args.spec).is_file():
                raise CliError(f"no such file: {args.spec}")
            spec = NetworkSpec.from_text(Path(args.spec).read_text())
        if args.attention is not None:
            spec = spec.replace(attention=args.attention == "on")
        net = build_network(spec, seed, require_blind_spot=False)
    report = perturbation_test(net, shape=args.shape, n_samples=args.samples, mode=args.mode,
                               seed=seed, delta=args.delta)
    sys.stdout.write(report.to_text())
    ok = report.verdict == "exact" or (args.mode == "statistical" and report.verdict == "bounded-leak")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_metrics(args) -> int:
    from .metrics import fsc, fsc_resolution, psnr, ssim3d

    ref, test = _read(args.ref), _read(args.test)
    if ref.dims != test.dims:
        raise CliError(f"dimension mismatch: {ref.dims} vs {test.dims}")
    p = psnr(test, ref, args.peak)
    s = ssim3d(test, ref)
    res_a = ""
    curve = None
    if args.fsc_half:
        a, b = (_read(f) for f in args.fsc_half)
        curve = fsc(a, b)
        res_a = f"{fsc_resolution(curve, a.spacing).angstrom:.6g}"
    header = "dataset,sigma,method,psnr_db,ssim,fsc_res_A,psnr_capped"
    row = f"{args.dataset},{args.sigma},{args.method},{p.db:.6f},{s:.6f},{res_a},{int(p.capped)}"
    print(header)
    print(row)
    if args.out:
        out = Path(args.out)
        new = not out.exists()
        with open(out, "a") as fh:
            if new:
                fh.write(header + "\n")
            fh.write(row + "\n")
    if args.plot:
        if curve is None:
            raise CliError("--plot needs --fsc-half")
        plot_fsc(curve, args.plot)
    return EXIT_OK


def plot_fsc(curve, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "voldenoise"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curve.frequency, curve.correlation, marker=".", lw=1)
    ax.axhline(0.5, color="gray", ls="--", lw=0.8)
    ax.set_xlabel("spatial frequency (cycles/voxel)")
    ax.set_ylabel("FSC")
    ax.set_ylim(-0.2, 1.05)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _common_flags(p, default):
    p.add_argument("--threads", type=int, default=1 if default else argparse.SUPPRESS,
                   help="worker threads for independent patch batches (results do not depend on it)")
    p.add_argument("--seed", type=int, default=None if default else argparse.SUPPRESS,
                   help="required by commands that draw random numbers")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voldenoise", description=__doc__.splitlines()[0])
    _common_flags(p, True)
    # the global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    _common_flags(common, False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add("simulate", help="phantom + noise + halves + manifest")
    s.add_argument("--dims", type=_dims, default=(64, 64, 64))
    s.add_argument("--noise", choices=("awgn", "poisson", "mixture"), default="awgn")
    s.add_argument("--sigma", type=float, default=0.2)
    s.add_argument("--lambda", dest="lam", type=float, default=0.02)
    s.add_argument("--mix-weights", type=float, nargs=2, default=(0.5, 0.5))
    s.add_argument("--wedge-deg", type=float, default=90.0)
    s.add_argument("--spacing", type=float, default=1.0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    s = add("filter", help="classical filter baseline")
    s.add_argument("--method", choices=("gaussian", "bilateral", "lowpass"), required=True)
    s.add_argument("--params", type=_kv, default={}, help="e.g. sigma=2 | sigma_s=2,sigma_r=0.1 | cutoff=0.25")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.set_defaults(func=cmd_filter)

    for name, helptext in (("train", "self-supervised training"), ("ablate", "train with one component removed")):
        s = add(name, help=helptext)
        if name == "ablate":
            s.add_argument("--component", choices=sorted(ABLATIONS), required=True)
        s.add_argument("--in", dest="input", required=True)
        s.add_argument("--config")
        s.add_argument("--out", dest="output", required=True)
        s.add_argument("--log")
        s.set_defaults(func=cmd_train if name == "train" else cmd_ablate)

    s = add("denoise", help="apply a checkpoint to a volume")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", dest="output", required=True)
    s.add_argument("--patch", type=int, default=36)
    s.add_argument("--stride", type=int, default=0)
    s.set_defaults(func=cmd_denoise)

    s = add("verify", help="J-invariance perturbation test with static cross-check")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--spec", help="network spec file (key=value); default spec if omitted")
    s.add_argument("--attention", choices=("on", "off"))
    s.add_argument("--mode", choices=("strict", "statistical"), default="strict")
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--shape", type=_dims, default=(27, 27, 27))
    s.add_argument("--delta", type=float, default=None)
    s.set_defaults(func=cmd_verify)

    s = add("metrics", help="PSNR / SSIM / FSC resolution as a CSV row")
    s.add_argument("--ref", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--fsc-half", nargs=2, metavar=("A", "B"))
    s.add_argument("--peak", type=float, default=None)
    s.add_argument("--dataset", default="volume")
    s.add_argument("--sigma", default="")
    s.add_argument("--method", default="")
    s.add_argument("--out")
    s.add_argument("--plot")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_FAIL
    from threadpoolctl import threadpool_limits

    try:
        # BLAS stays single-threaded: its reduction order changes with the
        # thread count.  --threads instead sizes pools over independent work.
        with threadpool_limits(limits=1):
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
