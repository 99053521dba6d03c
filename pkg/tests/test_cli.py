import hashlib
import subprocess
import sys

import numpy as np
import pytest

from voldenoise.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, main
from voldenoise.volgrid import Volume, read_cvol, write_cvol

QUICK_CFG = "patch_size=18\nstride=9\nepochs=1\nbase_channels=4\nattention=off\n"


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["--seed", "7", "simulate", "--dims", "36", "--out-dir", str(out)]) == EXIT_OK
    return out


class TestSimulate:
    def test_outputs_and_manifest(self, sim):
        for name in ("clean", "noisy", "half_a", "half_b"):
            assert read_cvol(sim / f"{name}.cvol").dims == (36, 36, 36)
        manifest = dict(line.split("=", 1) for line in (sim / "manifest.txt").read_text().splitlines())
        assert manifest["seed"] == "7" and manifest["noise"] == "awgn"
        assert manifest["sha256_noisy"] == sha(sim / "noisy.cvol")

    def test_repeat_identical(self, sim, tmp_path):
        assert main(["simulate", "--seed", "7", "--dims", "36", "--out-dir", str(tmp_path)]) == EXIT_OK
        for name in ("clean.cvol", "noisy.cvol", "half_a.cvol", "half_b.cvol", "manifest.txt"):
            assert sha(tmp_path / name) == sha(sim / name)

    def test_halves_differ(self, sim):
        assert not np.array_equal(read_cvol(sim / "half_a.cvol").data, read_cvol(sim / "half_b.cvol").data)

    def test_wedge_and_noise_models(self, tmp_path):
        args = ["--seed", "1", "simulate", "--dims", "16", "--noise", "mixture", "--wedge-deg", "60",
                "--mix-weights", "0.3", "0.7", "--out-dir", str(tmp_path)]
        assert main(args) == EXIT_OK
        assert "wedge_deg=60.0" in (tmp_path / "manifest.txt").read_text()

    def test_seed_required(self, tmp_path, capsys):
        assert main(["simulate", "--out-dir", str(tmp_path)]) == EXIT_ERROR
        assert "--seed" in capsys.readouterr().err


class TestFilter:
    @pytest.mark.parametrize("method,params", [("gaussian", "sigma=1"), ("bilateral", "sigma_s=1,sigma_r=0.2"),
                                               ("lowpass", "cutoff=0.2")])
    def test_methods(self, sim, tmp_path, method, params):
        out = tmp_path / "f.cvol"
        assert main(["filter", "--method", method, "--params", params,
                     "--in", str(sim / "noisy.cvol"), "--out", str(out)]) == EXIT_OK
        assert read_cvol(out).dims == (36, 36, 36)

    def test_missing_input(self, tmp_path, capsys):
        assert main(["filter", "--method", "gaussian", "--in", str(tmp_path / "nope.cvol"),
                     "--out", str(tmp_path / "o.cvol")]) == EXIT_ERROR
        assert "no such file" in capsys.readouterr().err


class TestTrainDenoise:
    def test_train_and_denoise(self, sim, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(QUICK_CFG)
        ckpt = tmp_path / "m.cvck"
        assert main(["--seed", "3", "train", "--in", str(sim / "noisy.cvol"), "--config", str(cfg),
                     "--out", str(ckpt)]) == EXIT_OK
        assert ckpt.is_file() and (tmp_path / "m.log.csv").is_file()
        assert "seed=3" in (tmp_path / "m.config.txt").read_text()
        out = tmp_path / "d.cvol"
        assert main(["denoise", "--ckpt", str(ckpt), "--in", str(sim / "noisy.cvol"), "--out", str(out),
                     "--patch", "18"]) == EXIT_OK
        assert read_cvol(out).dims == (36, 36, 36)

    def test_unknown_config_key(self, sim, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("epochs=1\nmomentum=0.9\n")
        assert main(["--seed", "1", "train", "--in", str(sim / "noisy.cvol"), "--config", str(cfg),
                     "--out", str(tmp_path / "m.cvck")]) == EXIT_ERROR
        assert "unknown key" in capsys.readouterr().err

    def test_ablate_loss_all(self, sim, tmp_path, capsys):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text(QUICK_CFG)
        assert main(["--seed", "3", "ablate", "--component", "loss-all", "--in", str(sim / "noisy.cvol"),
                     "--config", str(cfg), "--out", str(tmp_path / "a.cvck")]) == EXIT_OK
        text = (tmp_path / "a.config.txt").read_text()
        assert "w_guide=0.0" in text and "w_edge=0.0" in text and "w_tv=0.0" in text

    def test_missing_checkpoint(self, sim, tmp_path):
        assert main(["denoise", "--ckpt", str(tmp_path / "none.cvck"), "--in", str(sim / "noisy.cvol"),
                     "--out", str(tmp_path / "o.cvol")]) == EXIT_ERROR


class TestVerify:
    def test_default_strict_exit0(self, tmp_path, capsys):
        spec = tmp_path / "spec.txt"
        spec.write_text("base_channels=4\nattention=off\n")
        code = main(["--seed", "0", "verify", "--spec", str(spec), "--samples", "14"])
        out = capsys.readouterr().out
        assert code == EXIT_OK and "verdict=exact" in out and "static_verdict=exact" in out

    def test_attention_strict_fails(self, tmp_path):
        spec = tmp_path / "spec.txt"
        spec.write_text("base_channels=4\n")
        assert main(["--seed", "0", "verify", "--spec", str(spec), "--attention", "on",
                     "--samples", "7"]) == EXIT_FAIL

    def test_attention_statistical_ok(self, tmp_path, capsys):
        spec = tmp_path / "spec.txt"
        spec.write_text("base_channels=4\n")
        code = main(["--seed", "0", "verify", "--spec", str(spec), "--attention", "on",
                     "--mode", "statistical", "--samples", "7"])
        assert code == EXIT_OK and "verdict=bounded-leak" in capsys.readouterr().out

    def test_maxpool_fails(self, tmp_path):
        spec = tmp_path / "spec.txt"
        spec.write_text("base_channels=4\nattention=off\ndownsample=maxpool\n")
        assert main(["--seed", "0", "verify", "--spec", str(spec), "--samples", "7"]) == EXIT_FAIL


class TestMetrics:
    def test_ref_equals_test(self, sim, capsys):
        ref = str(sim / "clean.cvol")
        assert main(["metrics", "--ref", ref, "--test", ref]) == EXIT_OK
        header, row = capsys.readouterr().out.strip().splitlines()
        rec = dict(zip(header.split(","), row.split(",")))
        assert float(rec["psnr_db"]) == 100.0 and rec["psnr_capped"] == "1"
        assert float(rec["ssim"]) == 1.0

    def test_fsc_csv_and_plot(self, sim, tmp_path):
        csv = tmp_path / "m.csv"
        svg = tmp_path / "fsc.svg"
        args = ["metrics", "--ref", str(sim / "clean.cvol"), "--test", str(sim / "noisy.cvol"),
                "--fsc-half", str(sim / "half_a.cvol"), str(sim / "half_b.cvol"), "--dataset", "phantom",
                "--sigma", "0.2", "--method", "noisy", "--out", str(csv), "--plot", str(svg)]
        assert main(args) == EXIT_OK
        assert main(args) == EXIT_OK
        lines = csv.read_text().splitlines()
        assert lines[0] == "dataset,sigma,method,psnr_db,ssim,fsc_res_A,psnr_capped" and len(lines) == 3
        assert float(lines[1].split(",")[5]) > 0
        first = svg.read_bytes()
        assert first.startswith(b"<?xml")
        main(args)
        assert svg.read_bytes() == first

    def test_dims_mismatch(self, sim, tmp_path):
        other = tmp_path / "o.cvol"
        write_cvol(other, Volume(np.zeros((8, 8, 8))))
        assert main(["metrics", "--ref", str(sim / "clean.cvol"), "--test", str(other)]) == EXIT_ERROR


class TestUsage:
    def test_unknown_flag_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--seed", "1", "--out-dir", "x", "--frobnicate"])
        assert exc.value.code != 0

    def test_console_script(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "voldenoise.cli", "metrics", "--ref", str(tmp_path / "a"),
                               "--test", str(tmp_path / "b")], capture_output=True, text=True)
        assert proc.returncode == EXIT_ERROR and "no such file" in proc.stderr
