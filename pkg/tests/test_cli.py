import json
import subprocess
import sys

import numpy as np
import pytest

from gaprouter.cli import main
from gaprouter.providers import save_records

from conftest import PRICES_4_1, inst, multiple_choice_dataset


@pytest.fixture
def step_file(tmp_path, step_fixture):
    path = tmp_path / "step.jsonl"
    save_records(step_fixture, path)
    return path


@pytest.fixture
def mc_file(tmp_path):
    path = tmp_path / "mc.jsonl"
    save_records(multiple_choice_dataset(np.random.default_rng(5), 120), path)
    return path


@pytest.fixture
def price_file(tmp_path):
    path = tmp_path / "prices.txt"
    path.write_text("# per token, dollars\n" + "".join(f"{k}_price = {v}\n" for k, v in PRICES_4_1.items()))
    return path


STEP_GRID = ["--grid-step", "0.2", "--grid-count", "6"]


def test_calibrate_step_fixture(step_file, tmp_path, capsys):
    assert main(["calibrate", str(step_file), "--alpha", "0.5", *STEP_GRID]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["lambda_hat"] == 0.6 and doc["feasible"] and doc["n"] == 4
    out = tmp_path / "cal.json"
    assert main(["calibrate", str(step_file), "--alpha", "0.5", *STEP_GRID, "--out", str(out)]) == 0
    man = json.loads((tmp_path / "cal.json.manifest.json").read_text())
    assert man["command"] == "calibrate" and str(step_file) in man["inputs"]
    assert len(man["inputs"][str(step_file)]) == 64 and man["config"]["alpha"] == 0.5


def test_calibrate_infeasible(step_file, capsys):
    assert main(["calibrate", str(step_file), "--alpha", "0.1", *STEP_GRID]) == 3
    cap = capsys.readouterr()
    assert "n=9" in cap.err and json.loads(cap.out)["min_n"] == 9


def test_calibrate_zero_loss_gives_grid_minimum(tmp_path, capsys):
    path = tmp_path / "zero.jsonl"
    save_records([inst([0.9, 0.1], [1.0, 0.0], id=str(i)) for i in range(50)], path)
    assert main(["calibrate", str(path), "--alpha", "0.1", "--grid-start", "0.05"]) == 0
    assert json.loads(capsys.readouterr().out)["lambda_hat"] == 0.05


def test_calibrate_bad_input(tmp_path, capsys):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a"}\n')
    assert main(["calibrate", str(bad), "--alpha", "0.1"]) == 2
    assert "line 1" in capsys.readouterr().err
    assert main(["calibrate", str(tmp_path / "missing.jsonl"), "--alpha", "0.1"]) == 2
    assert main(["calibrate", str(bad), "--alpha", "-1"]) == 2


def _route(path, lam, capsys, *extra):
    assert main(["route", str(path), "--lambda", str(lam), *extra]) == 0
    return [json.loads(line) for line in capsys.readouterr().out.splitlines()]


def test_route_extremes_and_oracle(mc_file, capsys):
    from gaprouter.providers import load_records
    data = load_records(mc_file)
    primary = _route(mc_file, 0.0, capsys)
    assert all(r["actor"] == "primary" for r in primary)
    assert [r["chosen_index"] for r in primary] == [int(np.argmax(x.primary_scores.values)) for x in data]
    guard = _route(mc_file, 1.0, capsys)
    assert all(r["actor"] == "guardian" for r in guard)
    assert [r["chosen_index"] for r in guard] == [int(np.argmax(x.guardian_scores.values)) for x in data]
    mid = _route(mc_file, 0.2, capsys)
    for r, x in zip(mid, data):
        p, g = x.primary_scores.values, x.guardian_scores.values
        members = [a for a in range(len(p)) if max(p) - p[a] <= 0.2 + 1e-12]
        want = members[0] if len(members) == 1 else max(members, key=lambda a: (g[a], -a))
        assert r["chosen_index"] == want and r["candidate_count"] == len(members)
        assert r["chosen_action"] == x.actions[want]


def test_route_costs(mc_file, price_file, capsys):
    rows = _route(mc_file, 0.2, capsys, "--price-sheet", str(price_file))
    assert all(r["cost"] > 0 for r in rows)
    cheap = [r["cost"] for r in rows if r["actor"] == "primary"]
    dear = [r["cost"] for r in rows if r["actor"] == "guardian"]
    assert max(cheap) < min(dear)


def test_route_price_sheet_from_env(mc_file, price_file, capsys, monkeypatch):
    monkeypatch.setenv("GAPROUTER_PRICE_SHEET", str(price_file))
    assert all("cost" in r for r in _route(mc_file, 0.0, capsys))


def test_evaluate_outputs_and_determinism(mc_file, price_file, tmp_path, capsys):
    args = ["evaluate", str(mc_file), "--trials", "4", "--calib-size", "60", "--alphas", "0.3,0.2",
            "--binarize", "--price-sheet", str(price_file), "--baselines", "0.5", "--seed", "9"]
    assert main([*args, "--out-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
    capsys.readouterr()
    for name in ("report.csv", "frontier.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 9 and man["config"]["trials"] == 4 and len(man["inputs"]) == 2
    header = (tmp_path / "a" / "report.csv").read_text().splitlines()[0]
    assert header.startswith("policy,")
    assert main(["report", str(tmp_path / "a" / "frontier.json")]) == 0
    md = capsys.readouterr().out
    assert md.startswith("| Policy |") and "CA (alpha=0.3)" in md and "Random (q=0.5)" in md
    assert main(["report", str(tmp_path / "a" / "frontier.json"), "--format", "csv"]) == 0
    assert capsys.readouterr().out == (tmp_path / "a" / "report.csv").read_text()


def test_evaluate_rejects_oversized_split(mc_file, tmp_path):
    assert main(["evaluate", str(mc_file), "--calib-size", "200", "--out-dir", str(tmp_path)]) == 2


def test_simulate_flags_untestable(tmp_path, capsys):
    code = main(["simulate", "--reps", "1", "--n-list", "20,40", "--grid-step", "1e-3", "--assert-rate"])
    cap = capsys.readouterr()
    assert code == 0 and "unavailable" in cap.err
    assert json.loads(cap.out)["assertion"] == "unavailable"


def test_simulate_alpha_at_bound(tmp_path, capsys):
    out = tmp_path / "sim.json"
    assert main(["simulate", "--alpha", "1.0", "--reps", "3", "--n-list", "20,40", "--grid-step", "1e-3",
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert [r["mean_regret"] for r in doc["rows"]] == [0.0, 0.0]
    assert (tmp_path / "sim.csv").exists() and (tmp_path / "sim.json.manifest.json").exists()


def test_simulate_assert_rate_fails_loudly(capsys):
    # A threshold no finite study can meet.
    code = main(["simulate", "--reps", "300", "--n-list", "50,100,200", "--grid-step", "1e-4",
                 "--assert-rate", "--max-slope", "-50"])
    doc = json.loads(capsys.readouterr().out)
    assert (code, doc["assertion"]) in {(4, "fail"), (0, "unavailable")}


def test_simulate_guarantee(capsys):
    assert main(["simulate", "--reps", "50", "--n-list", "20,40", "--grid-step", "1e-3",
                 "--guarantee-n", "100"]) == 0
    g = json.loads(capsys.readouterr().out)["guarantee"][0]
    assert g["n"] == 100 and g["lower_bound"] == pytest.approx(0.3 - 2 / 101)


def test_report_rejects_non_frontier(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    assert main(["report", str(p)]) == 2


def test_console_script(step_file):
    res = subprocess.run([sys.executable, "-m", "gaprouter.cli", "calibrate", str(step_file),
                          "--alpha", "0.5", *STEP_GRID], capture_output=True, text=True)
    assert res.returncode == 0 and json.loads(res.stdout)["lambda_hat"] == 0.6
    res = subprocess.run([sys.executable, "-m", "gaprouter.cli", "route", str(step_file)],
                         capture_output=True, text=True)
    assert res.returncode == 2
