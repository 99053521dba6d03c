"""Acceptance suite: one test per criterion.

Each test records its measured values; the terminal summary prints one
PASS/FAIL line per criterion.  Training-based criteria share one desk-scale
run per noisy half (module fixtures).
"""

import hashlib
import subprocess
import sys
import time

import numpy as np
import pytest

from voldenoise.autograd import layers as L
from voldenoise.autograd.gradcheck import grad_check
from voldenoise.bsn import NetworkSpec, build_network
from voldenoise.jinv import perturbation_test, static_footprint
from voldenoise.losses import LossWeights, loss_edge, loss_guide, loss_rec, loss_total, loss_tv
from voldenoise.metrics import fsc, fsc_resolution, psnr, ssim3d
from voldenoise.shuffle import strided_shuffle, strided_unshuffle, volume_shuffle, volume_unshuffle
from voldenoise.simdata import add_awgn, apply_missing_wedge, make_halves, make_phantom
from voldenoise.trainer import TrainConfig, denoise_volume, train

DEFAULT_OFF = NetworkSpec(attention=False)
DESK = TrainConfig()  # patch 36, base 16, 15 epochs, Adam(2e-4, 0.5, 0.999), weights 0.8/0.5/0.05/0.01
WEDGE_EPOCHS = 5


@pytest.fixture(scope="module")
def clean():
    return make_phantom((64, 64, 64), seed=0)


@pytest.fixture(scope="module")
def halves(clean):
    return make_halves(clean, "awgn", seeds=(1, 2), sigma=0.2)


@pytest.fixture(scope="module")
def desk_a(halves):
    start = time.perf_counter()
    res = train(halves[0], DESK)
    den = denoise_volume(res.network, halves[0], DESK.patch_size)
    return res, den, time.perf_counter() - start


@pytest.fixture(scope="module")
def desk_b(halves):
    res = train(halves[1], DESK)
    return denoise_volume(res.network, halves[1], DESK.patch_size)


@pytest.mark.slow
@pytest.mark.criterion(1, "strict J-invariance of the default network")
def test_c01_strict_jinv(record):
    net = build_network(DEFAULT_OFF, seed=0)
    start = time.perf_counter()
    rep = perturbation_test(net, shape=(27, 27, 27), n_samples=200, mode="strict", seed=0)
    elapsed = time.perf_counter() - start
    record(f"max={rep.max_self_dependence:g} over {rep.n_samples} voxels, delta={rep.delta:.3g}, {elapsed:.0f}s")
    assert rep.n_samples == 200
    assert rep.max_self_dependence == 0.0 and rep.verdict == "exact"
    assert elapsed < 300


@pytest.mark.slow
@pytest.mark.criterion(2, "static verdict agrees with perturbation on >= 6 specs")
def test_c02_static_agrees(record):
    base = NetworkSpec(base_channels=8, attention=False)
    specs = {
        "default": base,
        "dbsn-blocks": base.replace(block="dbsn"),
        "mask3-c1": base.replace(mask_kernel=3, mask_center=1),
        "maxpool-unet": base.replace(downsample="maxpool"),
        "block-unshuffle": base.replace(downsample="block"),
        "unmasked-first": base.replace(mask_center=0),
        "dca-dilation-2": base.replace(dca_dilation=2),
    }
    rows, agree = [], 0
    for name, spec in specs.items():
        static = static_footprint(spec).verdict
        emp = perturbation_test(build_network(spec, 1, require_blind_spot=False), n_samples=48, seed=3).verdict
        agree += static == emp
        rows.append(f"{name}:{static}/{emp}")
    record(", ".join(rows))
    assert agree == len(specs) >= 6
    assert static_footprint(specs["maxpool-unet"]).verdict == "violated"


@pytest.mark.slow
@pytest.mark.criterion(3, "attention leak <= 100*delta/N")
def test_c03_attention_leak(record):
    net = build_network(NetworkSpec(attention=True), seed=0)
    rep = perturbation_test(net, shape=(27, 27, 27), n_samples=200, mode="statistical", seed=0)
    record(f"max={rep.max_self_dependence:.4g}, bound={rep.bound:.4g}, verdict={rep.verdict}")
    assert rep.n_samples == 200
    assert rep.max_self_dependence <= rep.bound


@pytest.mark.criterion(4, "shuffle/unshuffle roundtrips bit-identical")
def test_c04_roundtrips(record):
    rng = np.random.default_rng(4)
    count = 0
    for v in (2, 3):
        for _ in range(100):
            n = v * v * int(rng.integers(1, 3))
            x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3)), n, n, v * v))
            z = rng.standard_normal((1, v ** 3 * int(rng.integers(1, 3)), v, 2 * v, v))
            for down, up in ((volume_unshuffle, volume_shuffle), (strided_unshuffle, strided_shuffle)):
                np.testing.assert_array_equal(up(down(x, v), v), x)
                np.testing.assert_array_equal(down(up(z, v), v), z)
            count += 1
    record(f"{count} random tensors x 2 index schemes x 2 directions")
    assert count == 200


def _with_target(loss, shape):
    # targets are constants of the objective; only the prediction is differentiated
    target = np.random.default_rng(99).standard_normal(shape)
    return lambda p: loss(p, target)


def _gradient_cases():
    m5 = L.central_mask(5, 3)
    cases = {
        "conv3d-dense": (lambda x, w, b: L.conv3d(x, w, b), [(1, 2, 5, 5, 5), (3, 2, 3, 3, 3), (3,)]),
        "conv3d-masked": (lambda x, w: L.conv3d(x, w, mask=m5), [(1, 1, 6, 6, 6), (2, 1, 5, 5, 5)]),
        "conv3d-dilated": (lambda x, w: L.conv3d(x, w, dilation=3), [(1, 2, 7, 7, 7), (2, 2, 3, 3, 3)]),
        "conv3d-depthwise": (lambda x, w: L.conv3d(x, w, dilation=2, groups=4),
                             [(1, 4, 5, 5, 5), (4, 1, 3, 3, 3)]),
        "conv3d-pointwise": (lambda x, w, b: L.conv3d(x, w, b), [(2, 3, 3, 3, 3), (4, 3, 1, 1, 1), (4,)]),
        "layer_norm": (lambda x, g, b: L.layer_norm(x, g, b), [(2, 4, 3, 3, 3), (4,), (4,)]),
        "simple_gate": (L.simple_gate, [(1, 4, 3, 3, 3)]),
        "channel_attention": (L.channel_attention, [(2, 3, 3, 3, 3), (3, 3), (3,)]),
        "loss_rec": (_with_target(loss_rec, (1, 1, 4, 4, 4)), [(1, 1, 4, 4, 4)]),
        "loss_guide": (_with_target(loss_guide, (1, 1, 4, 4, 4)), [(1, 1, 4, 4, 4)]),
        "loss_edge": (_with_target(loss_edge, (1, 1, 5, 5, 5)), [(1, 1, 5, 5, 5)]),
        "loss_tv": (loss_tv, [(1, 1, 4, 5, 3)]),
    }
    return cases


def _network_case(seed):
    spec = NetworkSpec(base_channels=4, enc_blocks=1, mid_blocks=1)
    net = build_network(spec, seed).astype(np.float64)
    names = ["first.weight", "enc0.b0.dwconv.weight", "mid.b0.sca.weight", "up0.proj.weight", "head.conv2.bias"]

    def fn(x, *ws):
        for k, w in zip(names, ws):
            net.params[k] = w
        return net(x)
    rng = np.random.default_rng(seed)
    return fn, [rng.standard_normal((1, 1, 9, 9, 9))] + [net.params[k].data.copy() for k in names]


@pytest.mark.slow
@pytest.mark.criterion(5, "finite-difference gradient suite, float64, 5 seeds")
def test_c05_gradients(record):
    worst = {}
    for name, (fn, shapes) in _gradient_cases().items():
        for seed in range(5):
            rng = np.random.default_rng(seed)
            args = [rng.standard_normal(s) for s in shapes]
            res = grad_check(fn, args, seed=seed, step=1e-5, max_elements=40)
            worst[name] = max(worst.get(name, 0.0), res.max_rel_error)
    for seed in range(5):
        fn, args = _network_case(seed)
        res = grad_check(fn, args, seed=seed, step=1e-5, max_elements=12)
        worst["network-9^3"] = max(worst.get("network-9^3", 0.0), res.max_rel_error)
    top = max(worst, key=worst.get)
    record(f"{len(worst)} ops, worst {top} rel err {worst[top]:.2e}")
    assert all(v < 1e-3 for v in worst.values()), worst


@pytest.mark.slow
@pytest.mark.criterion(6, "desk denoising: +4 dB PSNR and +0.15 SSIM")
def test_c06_desk_denoising(record, clean, halves, desk_a):
    res, den, elapsed = desk_a
    noisy = halves[0]
    p0, p1 = psnr(noisy, clean).db, psnr(den, clean).db
    s0, s1 = ssim3d(noisy, clean), ssim3d(den, clean)
    record(f"PSNR {p0:.2f} -> {p1:.2f} dB (+{p1 - p0:.2f}), SSIM {s0:.3f} -> {s1:.3f} (+{s1 - s0:.3f}), "
           f"best epoch {res.best_epoch}, {elapsed:.0f}s")
    assert p1 >= p0 + 4.0
    assert s1 >= s0 + 0.15
    assert elapsed < 45 * 60
    vals = [r["val_loss"] for r in res.log.rows]
    assert len(vals) == 15 and vals[-1] < vals[0]


@pytest.mark.criterion(7, "loss_total = 0.8 rec + 0.5 guide + 0.05 edge + 0.01 tv")
def test_c07_loss_combination(record):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        p, n, f, b = (rng.standard_normal((2, 1, 6, 6, 6)) for _ in range(4))
        want = (0.8 * float(loss_rec(p, n).data) + 0.5 * float(loss_guide(p, f).data)
                + 0.05 * float(loss_edge(p, b).data) + 0.01 * float(loss_tv(p).data))
        got = float(loss_total(p, n, f, b, LossWeights()).data)
        worst = max(worst, abs(got - want))
    record(f"max |difference| {worst:.2e} over 20 random inputs")
    assert worst < 1e-6


@pytest.mark.slow
@pytest.mark.criterion(8, "w/o all auxiliary losses gives lower PSNR than the full loss")
def test_c08_ablation_direction(record, clean, halves, desk_a):
    _, den_full, _ = desk_a
    res = train(halves[0], DESK.replace(w_guide=0.0, w_edge=0.0, w_tv=0.0))
    den_rec = denoise_volume(res.network, halves[0], DESK.patch_size)
    full, rec_only = psnr(den_full, clean).db, psnr(den_rec, clean).db
    record(f"full {full:.2f} dB vs w/o all {rec_only:.2f} dB")
    assert rec_only < full


@pytest.mark.slow
@pytest.mark.criterion(9, "FSC pipeline and resolution improves after denoising")
def test_c09_fsc(record, clean, halves, desk_a, desk_b):
    np.testing.assert_allclose(fsc(clean, clean).correlation, 1.0, atol=1e-6)
    r = np.random.default_rng(9)
    noise = fsc(r.standard_normal((64, 64, 64)), r.standard_normal((64, 64, 64))).correlation
    assert np.all(np.abs(noise[2:]) < 0.2)
    _, den_a, _ = desk_a
    noisy_res = fsc_resolution(fsc(*halves), clean.spacing)
    den_res = fsc_resolution(fsc(den_a, desk_b), clean.spacing)
    record(f"noise |FSC| max beyond shell 2 {np.abs(noise[2:]).max():.3f}; FSC0.5 resolution "
           f"noisy {noisy_res.angstrom:.3f} A -> denoised {den_res.angstrom:.3f} A")
    assert den_res.angstrom < noisy_res.angstrom


@pytest.mark.slow
@pytest.mark.criterion(10, "missing-wedge trend across 70/60/40/30 degrees")
def test_c10_missing_wedge(record, clean):
    cfg = DESK.replace(epochs=WEDGE_EPOCHS)
    noisy_db, den_db = [], []
    for theta in (70, 60, 40, 30):
        noisy = add_awgn(apply_missing_wedge(clean, theta), 0.2, seed=1)
        res = train(noisy, cfg)
        den = denoise_volume(res.network, noisy, cfg.patch_size)
        noisy_db.append(psnr(noisy, clean).db)
        den_db.append(psnr(den, clean).db)
    record("noisy " + "/".join(f"{v:.2f}" for v in noisy_db) + " dB; denoised "
           + "/".join(f"{v:.2f}" for v in den_db) + f" dB ({WEDGE_EPOCHS} epochs)")
    assert all(a > b for a, b in zip(noisy_db, noisy_db[1:]))
    assert all(d > n for d, n in zip(den_db, noisy_db))


def _cli(*args, cwd):
    proc = subprocess.run([sys.executable, "-m", "voldenoise.cli", *args], cwd=cwd,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _digest(*paths):
    return [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]


@pytest.mark.slow
@pytest.mark.criterion(11, "byte-identical outputs across runs and thread counts {1, 4}")
def test_c11_determinism(record, tmp_path):
    (tmp_path / "cfg.txt").write_text("patch_size=18\nstride=9\nepochs=1\nbase_channels=4\n")
    digests = {}
    for run, threads in (("r1", 1), ("r2", 1), ("r3", 4)):
        d = tmp_path / run
        d.mkdir()
        _cli("--threads", str(threads), "--seed", "11", "simulate", "--dims", "36", "--out-dir", "sim", cwd=d)
        _cli("--threads", str(threads), "--seed", "11", "train", "--in", "sim/noisy.cvol",
             "--config", str(tmp_path / "cfg.txt"), "--out", "m.cvck", cwd=d)
        _cli("--threads", str(threads), "denoise", "--ckpt", "m.cvck", "--in", "sim/noisy.cvol",
             "--out", "den.cvol", "--patch", "18", cwd=d)
        files = [d / "sim" / f for f in ("clean.cvol", "noisy.cvol", "half_a.cvol", "half_b.cvol",
                                         "manifest.txt")] + [d / "m.cvck", d / "den.cvol"]
        digests[run] = _digest(*files)
    same_runs = digests["r1"] == digests["r2"]
    same_threads = digests["r1"] == digests["r3"]
    record(f"7 files; run1==run2: {same_runs}; threads1==threads4: {same_threads}")
    assert same_runs and same_threads
