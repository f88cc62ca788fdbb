import json

import numpy as np
import pytest
import yaml

from dexct.cli import main
from dexct.io import read_array

TINY = {
    "seed": 3,
    "phantom": {"kind": "hy", "size": 16},
    "geometry": {"n_angles": 13},
    "noise_level": 0.0,
    "rotation_deg": 0.0,
    "methods": {
        "ip": {"alpha": 40.0, "beta": 32.0, "tol": 1e-6, "max_iters": 60},
        "jtv": {"gamma": 0.001, "n_iters": 20},
    },
    "bench": {"sizes": [12], "alpha": 40.0, "beta": 20.0, "tol": 1e-6},
}


@pytest.fixture()
def config_path(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_generate_phantom(tmp_path, config_path, capsys):
    out = tmp_path / "ph"
    assert main(["generate-phantom", "--config", str(config_path), "--out", str(out)]) == 0
    img = read_array(out / "phantom_m1.dexc")
    assert img.shape == (16, 16)
    assert "wrote phantom" in capsys.readouterr().out


def test_generate_phantom_flag_overrides(tmp_path, capsys):
    out = tmp_path / "ph"
    assert main(["generate-phantom", "--phantom-kind", "bone", "--size", "24", "--out", str(out)]) == 0
    assert read_array(out / "phantom_m2.dexc").shape == (24, 24)


def test_simulate_then_reconstruct_then_segment_then_evaluate(tmp_path, config_path):
    sino_dir = tmp_path / "sino"
    assert main(["simulate", "--config", str(config_path), "--out", str(sino_dir)]) == 0
    assert (sino_dir / "data_low.dexc").exists()
    assert (sino_dir / "truth_m1.dexc").exists()

    recon_dir = tmp_path / "recon"
    assert (
        main(
            [
                "reconstruct", "--config", str(config_path), "--method", "ip",
                "--sino-dir", str(sino_dir), "--out", str(recon_dir),
            ]
        )
        == 0
    )
    recon = read_array(recon_dir / "recon_m1.dexc")
    assert recon.shape == (16, 16)
    assert np.all(recon >= 0.0)

    seg_dir = tmp_path / "seg"
    assert (
        main(
            [
                "segment",
                "--recon-m1", str(recon_dir / "recon_m1.dexc"),
                "--recon-m2", str(recon_dir / "recon_m2.dexc"),
                "--truth-m1", str(sino_dir / "truth_m1.dexc"),
                "--truth-m2", str(sino_dir / "truth_m2.dexc"),
                "--out", str(seg_dir),
            ]
        )
        == 0
    )
    seg = read_array(seg_dir / "seg_m1.dexc")
    truth = read_array(sino_dir / "truth_m1.dexc")
    assert int(seg.sum()) == int(truth.sum())

    metrics_path = tmp_path / "metrics.csv"
    assert (
        main(
            [
                "evaluate",
                "--recon-m1", str(recon_dir / "recon_m1.dexc"),
                "--recon-m2", str(recon_dir / "recon_m2.dexc"),
                "--truth-m1", str(sino_dir / "truth_m1.dexc"),
                "--truth-m2", str(sino_dir / "truth_m2.dexc"),
                "--method", "ip",
                "--out", str(metrics_path),
            ]
        )
        == 0
    )
    lines = metrics_path.read_text().splitlines()
    assert lines[0].startswith("method,material,l2_error")
    assert len(lines) == 3
    # noiseless unrotated HY at moderate regularization reconstructs well
    mis = float(lines[1].split(",")[4])
    assert mis <= 0.05


def test_run_pipeline(tmp_path, config_path):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config_path), "--out", str(out)]) == 0
    status = json.loads((out / "status.json").read_text())
    assert status["converged"] == {"ip": True, "jtv": True}
    # config copied byte-for-byte
    assert (out / "config.yaml").read_bytes() == config_path.read_bytes()


def test_bench_csv(tmp_path, config_path, capsys):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", str(config_path), "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "n,dimension,ipm_iters,pcg_iters,seconds"
    assert lines[1].startswith("12,288,")


def test_bench_sizes_flag(tmp_path, config_path):
    out = tmp_path / "bench.csv"
    assert main(["bench", "--config", str(config_path), "--sizes", "10", "--out", str(out)]) == 0
    assert out.read_text().splitlines()[1].startswith("10,200,")


def test_invalid_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("methods:\n  ip:\n    alpha: 1.0\n    beta: 2.0\n")
    out = tmp_path / "run"
    assert main(["run", "--config", str(bad), "--out", str(out)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_file_exit_code(tmp_path, capsys):
    assert (
        main(
            [
                "evaluate",
                "--recon-m1", str(tmp_path / "nope.dexc"),
                "--recon-m2", str(tmp_path / "nope.dexc"),
                "--truth-m1", str(tmp_path / "nope.dexc"),
                "--truth-m2", str(tmp_path / "nope.dexc"),
                "--out", str(tmp_path / "m.csv"),
            ]
        )
        == 1
    )
    assert "error" in capsys.readouterr().err
