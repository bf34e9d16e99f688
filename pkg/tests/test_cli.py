import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from planeslam.cli import main
from planeslam.io import read_tum_trajectory, write_problem
from planeslam.sim import DEFAULT_INTRINSICS

from scenarios import perturb, pose_recovery_problem

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _small_config(tmp_path, frames=6, noiseless=True):
    src = (CONFIGS / ("ambiguous-desk-noiseless.toml" if noiseless else "ambiguous-desk.toml"))
    text = src.read_text().replace("frames = 100", f"frames = {frames}")
    p = tmp_path / "cfg.toml"
    p.write_text(text)
    return p


def test_evaluate_identical(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    gt.write_text("1.0 0 0 0 0 0 0 1\n2.0 1 0 0 0 0 0 1\n3.0 1 1 0 0 0 0 1\n")
    assert main(["evaluate", str(gt), str(gt)]) == 0
    out = capsys.readouterr().out
    assert "rmse 0.000000" in out and "pairs 3" in out


def test_usage_errors(capsys, tmp_path):
    assert main(["frobnicate"]) == 1
    assert main(["run", "--no-such-flag"]) == 1
    assert main([]) == 1
    assert main(["evaluate", str(tmp_path / "missing.txt"), str(tmp_path / "m2.txt")]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[association]\nd_TT = 1\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "association.d_TT" in capsys.readouterr().err


def test_check_jacobians(capsys):
    assert main(["check-jacobians", "--instances", "5"]) == 0
    out = capsys.readouterr().out
    for kind in ("PosePoint", "PosePlane", "BoxPlane", "PointPlane", "PlaneParallel",
                 "PlanePerpendicular"):
        assert kind in out


def test_optimize_subcommand(tmp_path, capsys):
    rng = np.random.default_rng(2)
    problem, T = pose_recovery_problem(rng, DEFAULT_INTRINSICS)
    problem.T_cw = perturb(T, rng)
    path = tmp_path / "problem.json"
    write_problem(problem, path, DEFAULT_INTRINSICS)
    assert main(["optimize", str(path), "--log", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("iter lambda cost step_norm")
    sol = json.loads((tmp_path / "o" / "solution.json").read_text())
    assert np.allclose(sol["t"], T.translation, atol=5e-3)


def test_run_and_associate(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    out_dir = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--seed", "7", "--out", str(out_dir)]) == 0
    out = capsys.readouterr().out
    assert "precision 1.0000" in out and "ate_rmse" in out
    assert len(read_tum_trajectory(out_dir / "trajectory.txt")) == 6
    assert main(["associate", "--config", str(cfg), "--frame", "3", "--trace"]) == 0
    out = capsys.readouterr().out
    assert "rule=" in out and "match obs=" in out
    assert main(["associate", "--config", str(cfg), "--frame", "99"]) == 1


def test_run_flags(tmp_path, capsys):
    cfg = _small_config(tmp_path, frames=4)
    assert main(["run", "--config", str(cfg), "--association-mode", "params-only",
                 "--odom", "const-velocity", "--frames", "3",
                 "--out", str(tmp_path / "r")]) == 0
    assert "frames 3" in capsys.readouterr().out


def test_simulate(tmp_path, capsys):
    cfg = _small_config(tmp_path, frames=3, noiseless=False)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "sim")]) == 0
    frames = sorted((tmp_path / "sim" / "frames").glob("*.npz"))
    assert len(frames) == 3
    data = np.load(frames[0])
    assert data["T_cw_gt"].shape == (4, 4) and "cloud_0" in data
    scene = json.loads((tmp_path / "sim" / "scene.json").read_text())
    assert len(scene["planes"]) == 5


def test_console_script_module():
    res = subprocess.run([sys.executable, "-m", "planeslam.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "check-jacobians" in res.stdout
