import json
import re

import pytest

from aftergate.cli import main
from aftergate.harness import bundled_path


def test_theta_prints_window(capsys):
    assert main(["theta", "--curves", str(bundled_path("thresholds.dat"))]) == 0
    out = capsys.readouterr().out
    lo, hi = map(float, re.search(r"\[([\d.]+), ([\d.]+)\]", out).groups())
    assert lo <= 4.5 and hi >= 10.0


def test_missing_config_exit_code(capsys):
    assert main(["sweep", "--config", "missing.cfg"]) == 2
    assert "missing.cfg" in capsys.readouterr().err


def test_unknown_command_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_unknown_flag_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["theta", "--nope"])
    assert exc.value.code == 2


def test_fit_is_deterministic(tmp_path, capsys):
    data = bundled_path("afterpulse_curve.dat")
    args = ["--seed", "7", "fit", "--data", str(data), "--budget", "60", "--trials", "5000", "--perturb", "0.3"]
    assert main(args) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(args + ["--out", str(tmp_path)]) == 0
    second = json.loads(capsys.readouterr().out)
    assert first == second and first["seed"] == 7
    assert (tmp_path / "fit.json").exists() and (tmp_path / "fit_curve.dat").exists()


def test_sweep_from_config(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("[sweep]\nfrequencies_mhz = 1\ntransmittances = 0.5\nframes_per_cell = 50\ncalibration_frames = 50\n")
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "2"]) == 0
    assert (tmp_path / "o" / "results.csv").exists()
    assert main(["sweep", "--manifest", str(tmp_path / "o" / "manifest.json"), "--out", str(tmp_path / "r")]) == 0
    a = (tmp_path / "o" / "results.csv").read_text().splitlines()[1].split(",")[:9]
    b = (tmp_path / "r" / "results.csv").read_text().splitlines()[1].split(",")[:9]
    assert a == b


def test_infeasible_sweep_exit_code(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(
        "[sweep]\nfrequencies_mhz = 5\ntransmittances = 1.0\nframes_per_cell = 20\ncalibration_frames = 50\n"
        "[eve]\ndetector_efficiency = 0.02\n"
    )
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_baseline_trace_and_monitor(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert main(["baseline", "--frames", "20", "--trace", str(trace)]) == 0
    capsys.readouterr()
    assert main(["monitor", str(trace)]) == 0
    assert capsys.readouterr().out.strip().startswith("0 anomalies")
