import json
import subprocess
import sys

import pytest

from switchback_minimax import cli, verify
from switchback_minimax.design import Design, make_standard_design
from switchback_minimax.engine import Trajectory
from switchback_minimax.estimation import ESTIMANDS


@pytest.fixture
def star(tmp_path):
    paths = {}
    for p in (1, 2):
        path = tmp_path / f"star1_p{p}.json"
        make_standard_design("star1", 48, p).to_json(path)
        paths[p] = str(path)
    return paths


def run_json(capsys, argv):
    code = cli.run(argv)
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() and not argv.count("csv") else out), err


def test_design_optimal(capsys):
    code, data, _ = run_json(capsys, ["design", "--N", "20", "--T", "16", "--p", "2"])
    assert code == 0
    assert data["design"] == {"T": 16, "decision_points": [1, 6, 9, 12]}
    assert (data["a_star"], data["b_star"]) == (5, 3)
    assert data["schema_version"] == 1


def test_design_closed_form(capsys):
    code, data, _ = run_json(capsys, ["design", "--N", "20", "--T", "24", "--p", "1", "--method", "closed-form"])
    assert code == 0 and data["rule"] == "star1"


def test_design_infeasible_exit_2(capsys):
    code = cli.run(["design", "--N", "20", "--T", "5", "--p", "2"])
    err = json.loads(capsys.readouterr().err)
    assert code == 2 and err["code"] == "infeasible" and "horizon too short" in err["message"]


def test_usage_error_exit_1(capsys):
    assert cli.run(["design", "--N", "20"]) == 1
    assert json.loads(capsys.readouterr().err)["code"] == "usage"
    assert cli.run(["frobnicate"]) == 1


def test_bad_params_exit_1(capsys):
    assert cli.run(["design", "--N", "20", "--T", "16", "--p", "2", "--q1", "1.5"]) == 1
    assert "q1" in json.loads(capsys.readouterr().err)["message"]


def test_evaluate_and_selection(capsys, star):
    code, data, _ = run_json(capsys, ["evaluate", "--design", star[1], "--N", "20", "--p", "1", "--selection"])
    assert code == 0
    assert data["regime"] == "large_N" and data["objective"] > 0
    assert data["selection"]["r_q1"] == 0.5


def test_evaluate_regime_indeterminate_exit_2(capsys, star):
    code = cli.run(["evaluate", "--design", star[1], "--N", "3", "--p", "1", "--r", "0.8"])
    captured = capsys.readouterr()
    assert code == 2
    err = json.loads(captured.err)
    assert err["code"] == "regime_indeterminate" and set(err["candidates"]) == {"large_N", "small_N"}
    assert json.loads(captured.out)["objective"] is None


def test_evaluate_horizon_mismatch(capsys, star):
    assert cli.run(["evaluate", "--design", star[1], "--N", "20", "--T", "40", "--p", "1"]) == 1
    assert "horizon mismatch" in capsys.readouterr().err


def test_bad_design_file(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"T": 5, "decision_points": [2, 3]}))
    assert cli.run(["evaluate", "--design", str(bad), "--N", "5", "--p", "1"]) == 1
    assert "decision_points" in capsys.readouterr().err
    assert cli.run(["evaluate", "--design", str(tmp_path / "none.json"), "--N", "5", "--p", "1"]) == 1


def test_trial_estimate_round_trip(capsys, tmp_path, star):
    traj = tmp_path / "t.csv"
    assert cli.run(["trial", "--design", star[1], "--N", "6", "--m", "1", "--seed", "4", "--out", str(traj)]) == 0
    assert traj.read_text().startswith("unit,time,q,z,y\n")
    assert Trajectory.from_csv(traj).Z.shape == (6, 48)
    code, data, _ = run_json(capsys, ["estimate", "--trajectory", str(traj), "--design", star[1], "--p", "1"])
    assert code == 0
    for n in ESTIMANDS:
        e = data["estimates"][n]
        assert e["ci"][0] <= e["point"] <= e["ci"][1]
    code, text, _ = run_json(capsys, ["estimate", "--trajectory", str(traj), "--design", star[1], "--p", "1",
                                      "--format", "csv"])
    assert text.splitlines()[0] == "estimand,point,variance_estimate,ci_low,ci_high"


def test_trial_requires_seed(capsys, star):
    assert cli.run(["trial", "--design", star[1], "--N", "2"]) == 1


def test_estimate_horizon_mismatch(capsys, tmp_path, star):
    traj = tmp_path / "t.csv"
    cli.run(["trial", "--design", star[1], "--N", "2", "--seed", "1", "--out", str(traj)])
    other = tmp_path / "d.json"
    Design(40, (1, 5)).to_json(other)
    assert cli.run(["estimate", "--trajectory", str(traj), "--design", str(other), "--p", "1"]) == 1
    assert "horizon mismatch" in json.loads(capsys.readouterr().err)["message"]


def test_estimate_non_block_design_reports_note(capsys, tmp_path):
    d = tmp_path / "d.json"
    Design(12, (1, 3, 7)).to_json(d)
    traj = tmp_path / "t.csv"
    cli.run(["trial", "--design", str(d), "--N", "2", "--seed", "1", "--out", str(traj)])
    code, data, _ = run_json(capsys, ["estimate", "--trajectory", str(traj), "--design", str(d), "--p", "1"])
    assert code == 0 and "block-structured" in data["note"]
    assert data["estimates"]["direct_q1"]["ci"] is None


def test_order_test(capsys, tmp_path, star):
    t1, t2 = tmp_path / "a.csv", tmp_path / "b.csv"
    cli.run(["trial", "--design", star[1], "--N", "8", "--m", "1", "--seed", "1", "--out", str(t1)])
    cli.run(["trial", "--design", star[2], "--N", "8", "--m", "1", "--seed", "2", "--out", str(t2)])
    argv = ["order-test", "--trajectory1", str(t1), "--design1", star[1], "--trajectory2", str(t2),
            "--design2", star[2], "--p1", "1", "--p2", "2"]
    code, data, _ = run_json(capsys, argv)
    assert code == 0
    assert set(data["statistics"]) == set(ESTIMANDS) and data["combine"] == "any"
    assert data["critical_value"] == pytest.approx(1.959964, abs=1e-6)
    code, data, _ = run_json(capsys, argv + ["--combine", "bonferroni"])
    assert data["overall_critical_value"] > data["critical_value"]
    assert cli.run(argv[:-4] + ["--p1", "2", "--p2", "1"]) == 1


def test_simulate(capsys, tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"schema_version": 1, "protocol": "normality_qq", "N": 4, "T": 40, "p": 1,
                               "replications": 12, "model": {"type": "model2", "m": 1}}))
    qq = tmp_path / "qq.csv"
    out = tmp_path / "r.json"
    assert cli.run(["simulate", "--config", str(cfg), "--seed", "3", "--out", str(out), "--qq-out", str(qq), "--quiet"]) == 0
    rep = json.loads(out.read_text())
    assert rep["schema_version"] == 1 and rep["config"]["seed"] == 3
    assert qq.read_text().startswith("schema_version,estimand,theoretical,sample\n")
    assert cli.run(["simulate", "--config", str(cfg)]) == 1  # --seed is required
    capsys.readouterr()


def test_simulate_bad_config(capsys, tmp_path):
    cfg = tmp_path / "s.json"
    cfg.write_text(json.dumps({"protocol": "risk_table", "N": 4, "T": 40, "p": 1, "replications": 2}))
    assert cli.run(["simulate", "--config", str(cfg), "--seed", "0"]) == 1
    assert "schema_version" in capsys.readouterr().err


def test_verify_pass(capsys):
    code, data, err = run_json(capsys, ["verify", "--suite", "oracle"])
    assert code == 0 and data["passed"]
    assert err.count("PASS") == 6


def test_verify_failure_exit_3(capsys, monkeypatch):
    monkeypatch.setattr(verify, "run_oracle_suite", lambda seed: [verify.CheckResult("fake", False, "forced")])
    assert cli.run(["verify", "--quiet"]) == 3
    assert json.loads(capsys.readouterr().out)["passed"] is False


def test_csv_error_format(capsys):
    assert cli.run(["design", "--N", "20", "--T", "5", "--p", "2", "--format", "csv"]) == 2
    assert capsys.readouterr().err.startswith("error [infeasible]")


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "switchback_minimax", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "switchback" in proc.stdout
