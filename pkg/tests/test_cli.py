import csv
import json
import subprocess
import sys
import time

import pytest

from bnfisher.arch import mnist_fc, serialize
from bnfisher.cli import main
from conftest import CONFIGS, GOLDEN

GOLD = json.loads((GOLDEN / "recursions.json").read_text())


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def tiny_arch(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(serialize(mnist_fc(1.0, True, width=16, input_dim=12, n_out=3, depth=3)))
    return p


def test_predict_matches_golden(tmp_path, capsys):
    assert main(["predict", "--arch", str(CONFIGS / "mnist_fc_bn.yaml"), "--out", str(tmp_path)]) == 0
    rows = {r["quantity"]: float(r["value"]) for r in read_csv(tmp_path / "spectral.csv")}
    assert rows["lambda_bound"] == pytest.approx(GOLD["fc_bn_g1.0"]["lambda_bound"], rel=1e-12)
    assert rows["eta_star"] == pytest.approx(3.8 / rows["lambda_bound"], rel=1e-12)
    assert rows["eta_opt"] == pytest.approx(rows["eta_star"] / 2, rel=1e-15)
    assert [r["layer"] for r in read_csv(tmp_path / "profile.csv")] == ["0", "1", "2", "3", "4"]
    header = capsys.readouterr().out.splitlines()[0].split()
    assert "gamma" in header


def test_predict_vanilla_has_no_gamma_column(tmp_path, capsys):
    assert main(["predict", "--arch", str(CONFIGS / "mnist_fc_vanilla.yaml"), "--out", str(tmp_path)]) == 0
    assert "gamma" not in capsys.readouterr().out.splitlines()[0].split()


def test_predict_conv_gamma_override(tmp_path, capsys):
    assert main(["predict", "--arch", str(CONFIGS / "cifar_conv_bn.yaml"), "--gamma", "2",
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "H_hat" in out and "Delta_hat" in out
    rows = {r["quantity"]: float(r["value"]) for r in read_csv(tmp_path / "spectral.csv")}
    assert rows["lambda_bound"] == pytest.approx(GOLD["conv_bn_g2.0"]["lambda_bound"], rel=1e-12)


def test_missing_file_is_usage_error(tmp_path, capsys):
    assert main(["predict", "--arch", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_missing_arch_is_usage_error(tmp_path):
    assert main(["predict", "--out", str(tmp_path)]) == 2


def test_invalid_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("layers: 3\n")
    assert main(["predict", "--arch", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.yaml" in capsys.readouterr().err


def test_unwritable_output_is_usage_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["predict", "--arch", str(CONFIGS / "mnist_fc_bn.yaml"), "--out", str(blocker / "x")]) == 2


def test_sweep_rows(tmp_path):
    assert main(["sweep", "--arch", str(CONFIGS / "mnist_fc_bn.yaml"), "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "sweep.csv")
    assert len(rows) == 80
    van = float(next(r for r in rows if r["variant"] == "vanilla")["eta_star"])
    for r in rows:
        if r["variant"] == "bn" and float(r["gamma"]) <= 1.0:
            assert float(r["eta_star"]) > van


def test_sweep_rejects_vanilla_and_bad_grid(tmp_path):
    assert main(["sweep", "--arch", str(CONFIGS / "mnist_fc_vanilla.yaml"), "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--arch", str(CONFIGS / "mnist_fc_bn.yaml"), "--gamma-grid", "4:1:0.1",
                 "--out", str(tmp_path)]) == 2


def test_validate_warns_and_writes_report(tiny_arch, tmp_path, capsys):
    code = main(["validate", "--arch", str(tiny_arch), "--nets", "2", "--batch", "256",
                 "--out", str(tmp_path), "-q"])
    assert code in (0, 1)
    assert "finite-width" in capsys.readouterr().err
    rows = read_csv(tmp_path / "validate.csv")
    assert rows and set(rows[0]) == {"quantity", "layer", "theory", "empirical", "std_error", "z"}


def test_validate_fault_injection_fails(tmp_path):
    p = tmp_path / "v.yaml"
    p.write_text(serialize(mnist_fc(1.0, False, width=256, input_dim=100, n_out=10, depth=4)))
    args = ["validate", "--arch", str(p), "--nets", "8", "--batch", "512", "--out", str(tmp_path), "-q"]
    assert main(args) == 0
    assert main(args + ["--theory-scale", "1.5"]) == 1


def test_validate_rejects_small_batch(tiny_arch, tmp_path):
    assert main(["validate", "--arch", str(tiny_arch), "--batch", "100", "--out", str(tmp_path)]) == 2


def test_phase_smoke_is_reproducible(tiny_arch, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        t0 = time.time()
        code = main(["phase", "--arch", str(tiny_arch), "--gamma-grid", "0.5,2", "--eta-grid=-2,0",
                     "--epochs", "2", "--subset", "256", "--test-subset", "64", "--n-seeds", "2",
                     "--out", str(out), "-q"])
        assert code == 0
        assert time.time() - t0 < 60
        assert sorted(p.name for p in out.iterdir()) == ["phase.csv", "phase.svg"]
        runs.append(out)
    for name in ("phase.csv", "phase.svg"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes()
    assert len(read_csv(runs[0] / "phase.csv")) == 4


def test_phase_needs_bn(tmp_path):
    assert main(["phase", "--arch", str(CONFIGS / "mnist_fc_vanilla.yaml"), "--out", str(tmp_path)]) == 2


def test_baseline_smoke(tiny_arch, tmp_path):
    assert main(["baseline", "--arch", str(tiny_arch), "--sigma-grid", "1,2", "--eta-grid=-2",
                 "--epochs", "1", "--subset", "256", "--test-subset", "64", "--n-seeds", "1",
                 "--out", str(tmp_path), "-q"]) == 0
    rows = read_csv(tmp_path / "baseline.csv")
    assert [r["sigma_w_sq"] for r in rows] == ["1.0", "2.0"]


def test_bad_mnist_dir(tiny_arch, tmp_path):
    assert main(["phase", "--arch", str(tiny_arch), "--mnist-dir", str(tmp_path / "none"),
                 "--out", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "bnfisher.cli", "predict", "--arch",
                          str(CONFIGS / "mnist_fc_vanilla.yaml"), "--out", str(tmp_path), "-q"],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "lambda_bound" in res.stdout
