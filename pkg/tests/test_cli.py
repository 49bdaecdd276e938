import csv
import json
import subprocess
import sys

import pytest

from pedfuse.cli import main
from pedfuse.logio import read_records


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--preset", "multi_agent", "--seed", "7", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def solved(simulated, tmp_path_factory):
    d = tmp_path_factory.mktemp("solve")
    code = main(["solve", "--log", str(simulated / "log.jsonl"), "--truth", str(simulated / "truth.jsonl"),
                 "--out", str(d)])
    assert code == 0
    return d


def test_simulate_deterministic(simulated, tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--preset", "multi_agent", "--seed", 7, "--out", tmp_path)
    assert code == 0
    assert json.loads(out)["records"]["step"] > 0
    for name in ("log.jsonl", "truth.jsonl"):
        assert (tmp_path / name).read_bytes() == (simulated / name).read_bytes()


def test_solve_outputs(solved):
    recs = read_records(solved / "trajectory.jsonl")
    assert {r.agent for r in recs if r.type == "pose"} == {0, 1, 2, 3}
    assert sum(r.type == "anchor" for r in recs) == 4
    report = json.loads((solved / "report.json").read_text())
    assert report["final"]["final_cost"] <= report["final"]["initial_cost"]
    assert {"motion", "range", "prior"} <= set(report["final"]["cost_breakdown"])
    rows = list(csv.DictReader((solved / "trajectory.csv").open()))
    assert {r["kind"] for r in rows} == {"estimate", "anchor", "truth", "true_anchor"}
    assert (solved / "trajectory.png").stat().st_size > 0


def test_solve_deterministic(simulated, solved, tmp_path):
    assert main(["solve", "--log", str(simulated / "log.jsonl"), "--truth", str(simulated / "truth.jsonl"),
                 "--out", str(tmp_path)]) == 0
    for name in ("trajectory.jsonl", "report.json", "trajectory.csv", "trajectory.png"):
        assert (tmp_path / name).read_bytes() == (solved / name).read_bytes(), name


def test_eval(simulated, solved, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--estimate", solved / "trajectory.jsonl", "--truth",
                       simulated / "truth.jsonl", "--report", solved / "report.json", "--out", tmp_path)
    assert code == 0
    body = json.loads((tmp_path / "metrics.json").read_text())
    assert body == json.loads(out)
    assert len(body["per_run_rmse"]) == 4
    assert body["rmse_m"]["mean"] >= 0 and body["rmse_m"]["std"] >= 0
    assert all(r <= f + 1e-9 for r, f in zip(body["rigid_rmse"], body["per_run_rmse"]))
    assert body["anchor_rmse_m"] is not None and body["scale_error"] is not None
    assert body["cost_breakdown"]


def test_eval_identical_is_zero(simulated, tmp_path, capsys):
    recs = [r for r in read_records(simulated / "truth.jsonl") if r.type == "groundtruth"]
    est = tmp_path / "est.jsonl"
    est.write_text("".join(
        line.replace('"type":"groundtruth"', '"type":"pose"') + "\n"
        for line in (simulated / "truth.jsonl").read_text().splitlines() if '"groundtruth"' in line))
    assert len(read_records(est)) == len(recs)
    code, out, _ = run(capsys, "eval", "--estimate", est, "--truth", simulated / "truth.jsonl", "--out", tmp_path)
    assert code == 0
    body = json.loads(out)
    assert body["rmse_m"]["mean"] == 0.0
    assert body["per_run_rmse"] == [0.0] * 4


def test_solve_options(simulated, tmp_path, capsys):
    code, out, _ = run(capsys, "solve", "--log", simulated / "log.jsonl", "--motion", "ronin", "--adaptive", "off",
                       "--anchors", 2, "--init-scale", 0.7, "--loop-mode", "none", "--incremental",
                       "--set", "solver.max_iterations=30", "--out", tmp_path)
    assert code == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert "loop_ble" not in report["final"]["cost_breakdown"]
    assert report["solves"] > 1
    assert all(abs(v - 0.7) < 1e-12 for v in report["scale_mean"].values())
    assert sum(r.type == "anchor" for r in read_records(tmp_path / "trajectory.jsonl")) == 2


def test_solve_config_file(simulated, tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("weights:\n  profile: sensor\n  range_sigma: 0.2\npipeline:\n  loop_mode: proximity\n")
    code, _, _ = run(capsys, "solve", "--log", simulated / "log.jsonl", "--config", cfg, "--out", tmp_path)
    assert code == 0


def test_anchor_noise(simulated, tmp_path, capsys):
    code, _, err = run(capsys, "solve", "--log", simulated / "log.jsonl", "--anchor-noise-sigma", 1.0,
                       "--out", tmp_path)
    assert code == 1
    assert json.loads(err)["error"] == "ConfigError"
    code, _, _ = run(capsys, "solve", "--log", simulated / "log.jsonl", "--truth", simulated / "truth.jsonl",
                     "--anchor-noise-sigma", 1.0, "--out", tmp_path)
    assert code == 0


def test_jacobian_check(tmp_path, capsys):
    code, out, _ = run(capsys, "jacobian-check", "--configurations", 20, "--out", tmp_path)
    assert code == 0
    body = json.loads(out)
    assert body["passed"] and set(body["factors"]) == {"pdr_motion", "ronin_motion", "scale_smooth",
                                                        "coarse_loop", "range", "prior"}
    assert json.loads((tmp_path / "jacobian_check.json").read_text()) == body


def test_sweep(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--axis", "anchors", "--anchors", "0..4", "--runs", 1,
                       "--methods", "adaptive_pdr", "--batch", "--out", tmp_path)
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "sweep_anchors.csv").open()))
    assert [r["value"] for r in rows] == ["0", "1", "2", "3", "4"]
    assert all(float(r["rmse_mean"]) >= 0 and float(r["rmse_std"]) >= 0 for r in rows)
    assert (tmp_path / "sweep_anchors.png").exists()
    assert len(list((tmp_path / "cells").glob("*.json"))) == 5
    assert json.loads(out)["cells"] == 5


@pytest.mark.parametrize("argv, kind", [
    (["solve", "--log", "/nonexistent/log.jsonl", "--out", "{tmp}"], "FileNotFoundError"),
    (["simulate", "--preset", "office", "--out", "{tmp}"], "ValueError"),
    (["solve", "--log", "{bad}", "--out", "{tmp}"], "LogFormatError"),
    (["solve", "--log", "{log}", "--set", "solver.bogus=1", "--out", "{tmp}"], "ConfigError"),
    (["solve", "--log", "{log}", "--set", "nonsense", "--out", "{tmp}"], "ConfigError"),
    (["sweep", "--axis", "anchors", "--methods", "magic", "--out", "{tmp}"], "ValueError"),
])
def test_errors_are_json(argv, kind, simulated, tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{broken\n")
    subs = {"{tmp}": str(tmp_path / "o"), "{bad}": str(bad), "{log}": str(simulated / "log.jsonl")}
    code, out, err = run(capsys, *[subs.get(a, a) for a in argv])
    assert code != 0 and out == ""
    rec = json.loads(err)
    assert rec["error"] == kind and rec["message"] and rec["command"] == argv[0]


def test_usage_error_is_json(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--out", "x"])
    assert exc.value.code == 2
    rec = json.loads(capsys.readouterr().err)
    assert rec["error"] == "UsageError" and "--log" in rec["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pedfuse", "simulate", "--preset", "scale_sweep", "--out",
                           str(tmp_path)], capture_output=True, text=True, check=False)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "log.jsonl").exists()
