import argparse

import numpy as np
import pytest

from twostream.autodiff import snapshot
from twostream.cli import RUN_DEFAULTS, SEED_ENV, echo, main, parse_config_text, resolve_config
from twostream.unet import build_unet, load_checkpoint

SMALL = ["--set", "frames=4", "--set", "height=16", "--set", "width=16"]


def _args(**kw):
    return argparse.Namespace(**{"config": None, "set": None, **kw})


def test_echo_round_trips_defaults():
    assert parse_config_text(echo(RUN_DEFAULTS)) == RUN_DEFAULTS


def test_precedence_and_env_seed(tmp_path, monkeypatch):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text("# comment\nlr = 0.5\nsteps=7\n")
    monkeypatch.setenv(SEED_ENV, "9")
    cfg = resolve_config(_args(config=str(cfgfile), steps=3))
    assert cfg["lr"] == 0.5 and cfg["steps"] == 3 and cfg["seed"] == 9
    cfgfile.write_text("seed=4\n")
    assert resolve_config(_args(config=str(cfgfile)))["seed"] == 4
    assert resolve_config(_args(config=str(cfgfile), seed=1))["seed"] == 1


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("learning_rate=1\n")
    assert main(["build", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["build", "--set", "height=20", "--out", str(tmp_path / "o")]) == 2
    assert main(["build", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path / "o")]) == 2


def test_train_requires_mode(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert "--mode is required" in capsys.readouterr().err


def test_zero_step_train_checkpoint_equals_init(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--mode", "parallel", "--steps", "0", "--out", str(out)] + SMALL) == 0
    model = load_checkpoint(out / "checkpoint")
    fresh = build_unet(model.cfg)
    assert all(fresh.params[n].data.tobytes() == p.data.tobytes() for n, p in model.params.items())
    assert (out / "train.csv").read_text() == "step,loss,ms,retained_bytes\n"
    assert "train.csv" in (out / "manifest.txt").read_text()
    assert "mode=parallel" in (out / "config.txt").read_text()


def test_build_then_sample_is_deterministic(tmp_path, capsys):
    assert main(["build", "--out", str(tmp_path / "b")] + SMALL) == 0
    assert "params_total=" in capsys.readouterr().out
    runs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        assert main(["sample", "--checkpoint", str(tmp_path / "b" / "checkpoint"), "--steps", "2",
                     "--class", "1", "--seed", "5", "--out", str(out)]) == 0
        runs.append((out / "sample.mobt").read_bytes())
        assert len(list((out / "frames").glob("*.ppm"))) == 4
    assert runs[0] == runs[1]
    assert snapshot.load(tmp_path / "s1" / "sample.mobt").shape == (1, 4, 4, 16, 16)


def test_sample_error_paths(tmp_path):
    assert main(["sample", "--checkpoint", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert main(["build", "--out", str(tmp_path / "b")] + SMALL) == 0
    ck = str(tmp_path / "b" / "checkpoint")
    assert main(["sample", "--checkpoint", ck, "--class", "9", "--out", str(tmp_path / "o")]) == 2
    assert main(["sample", "--checkpoint", ck, "--steps", "1000", "--out", str(tmp_path / "o")]) == 2


def test_bench_single_pair_prints_no_ratios(tmp_path, capsys):
    assert main(["bench", "--mode", "serial", "--repeats", "1", "--warmup", "0", "--batch", "1",
                 "--out", str(tmp_path)] + SMALL) == 0
    out = capsys.readouterr().out
    assert "memory_ratio=" not in out
    assert len((tmp_path / "bench.csv").read_text().splitlines()) == 2
    assert main(["bench", "--workers", "2", "--out", str(tmp_path)] + SMALL) == 2


def test_bench_cross_prints_ratios(tmp_path, capsys):
    assert main(["bench", "--cross", "--repeats", "1", "--warmup", "0", "--batch", "1",
                 "--out", str(tmp_path)] + SMALL) == 0
    out = capsys.readouterr().out
    ratio = float(out.split("memory_ratio=")[1].split()[0])
    assert 0 < ratio < 1
    assert "bwd_time_ratio=" in out


def test_verify_passes_and_poison_fails(capsys):
    assert main(["verify", "--coords", "4"] + SMALL) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "PASS            gradient_isolation" in out
    assert main(["verify", "--coords", "4", "--poison", "spatial"] + SMALL) == 1
    captured = capsys.readouterr()
    assert "FAIL            gradient_isolation" in captured.out
    assert "verification failed: gradient_isolation" in captured.err


def test_verify_serial_marks_isolation_absent(capsys):
    assert main(["verify", "--mode", "serial", "--coords", "4"] + SMALL) == 0
    assert "EXPECTED-ABSENT gradient_isolation" in capsys.readouterr().out


def test_analyze_reports(capsys):
    assert main(["analyze"] + SMALL) == 0
    out = capsys.readouterr().out
    assert "critical_path_per_block: 3" in out
    assert "spatial_ops_backward: 0" in out
