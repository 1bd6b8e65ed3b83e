import csv
import dataclasses
import hashlib
import json
import subprocess
import sys

import pytest

from imputecast.cli import compare_reports, main
from imputecast.metrics import EvaluationReport, evaluate_model
from imputecast.model import Arch, ForecasterParams, save_checkpoint
from imputecast.pipeline import MinMax, SimulationSpec, SplitSpec, ingest_csv
from imputecast.train import DEFAULT_LEVELS
from imputecast.workflow import evaluation_segment

TINY = ["--n-layers", "1", "--hidden", "3", "--lag-minutes", "10", "--T", "8",
        "--batch-size", "16", "--max-epochs", "1", "--patience", "2"]


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "sim.csv"
    assert main(["simulate", "--n", "1200", "--seed", "4", "--out", str(path)]) == 0
    return path


def train(data, out, *extra):
    return main(["train", "--data", str(data), "--out-dir", str(out), *TINY, *extra])


# ---------------------------------------------------------------------------
# simulate


def test_simulate_empty_has_header_only(tmp_path):
    assert main(["simulate", "--n", "0", "--out", str(tmp_path / "e.csv")]) == 0
    assert (tmp_path / "e.csv").read_text() == "timestamp,power\n"


def test_simulate_is_deterministic_and_bounded(tmp_path, data):
    again = tmp_path / "again.csv"
    main(["simulate", "--n", "1200", "--seed", "4", "--out", str(again)])
    assert again.read_bytes() == data.read_bytes()
    s = ingest_csv(data)
    assert len(s) == 1200 and s.mask.all()
    assert s.values.min() >= 0.0 and s.values.max() <= SimulationSpec().capacity
    params = json.loads(data.with_suffix(".csv.params.json").read_text())
    assert params["seed"] == 4 and params["capacity"] == 52.5


def test_simulate_bad_spec_is_usage_error(tmp_path):
    assert main(["simulate", "--n", "10", "--capacity", "-1", "--out", str(tmp_path / "x.csv")]) == 2


# ---------------------------------------------------------------------------
# train


def test_invalid_method_exits_with_usage_code(data, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "imputecast", "train", "--data", str(data),
                           "--method", "spline"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "invalid choice" in proc.stderr
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"method": "spline", "data": str(data)}))
    assert main(["train", "--config", str(cfg)]) == 2


def test_runtime_failure_exits_with_one(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing.csv"), "--out-dir", str(tmp_path)]) == 1


def test_train_writes_outputs_and_snapshot_reproduces(data, tmp_path):
    out = tmp_path / "run"
    assert train(data, out, "--missing-rate", "0.25", "--seed", "3") == 0
    for name in ("checkpoint.json", "train_report.json", "config.json"):
        assert (out / name).exists()
    snap = json.loads((out / "config.json").read_text())
    assert snap["missing_rate"] == 0.25 and snap["seed"] == 3 and snap["hidden"] == 3
    rerun = tmp_path / "rerun"
    assert main(["train", "--config", str(out / "config.json"), "--out-dir", str(rerun)]) == 0
    assert sha(out / "checkpoint.json") == sha(rerun / "checkpoint.json")
    report = json.loads((out / "train_report.json").read_text())
    assert report["checkpoint_sha256"] == sha(out / "checkpoint.json")


def test_flags_override_config_file(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(data), "hidden": 5, "missing_rate": 0.1}))
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--hidden", "2", "--out-dir", str(out),
                 "--n-layers", "1", "--max-epochs", "1", "--T", "8", "--lag-minutes", "5"]) == 0
    snap = json.loads((out / "config.json").read_text())
    assert snap["hidden"] == 2 and snap["missing_rate"] == 0.1


def test_unknown_config_key_is_usage_error(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": str(data), "hiden": 5}))
    assert main(["train", "--config", str(cfg)]) == 2


def test_output_dir_from_environment(data, tmp_path, monkeypatch):
    monkeypatch.setenv("IMPUTECAST_OUTPUT_DIR", str(tmp_path / "envout"))
    assert main(["train", "--data", str(data), *TINY, "--method", "li", "--seed", "2"]) == 0
    assert (tmp_path / "envout" / "li-2" / "checkpoint.json").exists()


def test_grid_search_from_cli(data, tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"hidden": [2, 3], "lag_minutes": [5]}))
    out = tmp_path / "g"
    assert train(data, out, "--grid", str(grid)) == 0
    report = json.loads((out / "train_report.json").read_text())
    assert len(report["grid"]) == 2
    snap = json.loads((out / "config.json").read_text())
    assert snap["grid"] is None and snap["model_seed"] is not None
    rerun = tmp_path / "g2"
    assert main(["train", "--config", str(out / "config.json"), "--out-dir", str(rerun)]) == 0
    assert sha(out / "checkpoint.json") == sha(rerun / "checkpoint.json")


# ---------------------------------------------------------------------------
# evaluate


def test_zero_missing_methods_give_identical_files(data, tmp_path):
    outs = {}
    for method in ("endtoend", "li", "knn"):
        out = tmp_path / method
        assert train(data, out, "--method", method, "--missing-rate", "0", "--seed", "1") == 0
        assert main(["evaluate", "--run-dir", str(out)]) == 0
        outs[method] = out
    for method in ("li", "knn"):
        for name in ("checkpoint.json", "report.json", "report_levels.csv", "forecast.csv"):
            assert sha(outs["endtoend"] / name) == sha(outs[method] / name), (method, name)


def test_evaluate_outputs(data, tmp_path):
    out = tmp_path / "r"
    train(data, out, "--missing-rate", "0.2", "--seed", "5")
    assert main(["evaluate", "--run-dir", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["meta"]["missing_rate"] == 0.2 and report["meta"]["seed"] == 5
    assert len(report["meta"]["model_id"]) == 64
    rows = list(csv.reader(open(out / "forecast.csv")))
    assert len(rows) - 1 == report["n_origins"]
    assert sum(int(r[2]) for r in rows[1:]) == report["n"]
    for row in rows[1:]:
        q = [float(v) for v in row[3:]]
        assert all(a <= b for a, b in zip(q, q[1:]))
    levels = list(csv.DictReader(open(out / "report_levels.csv")))
    assert len(levels) == 19


def test_evaluate_stub_checkpoint_matches_constant_forecaster(data, tmp_path):
    raw = ingest_csv(data)
    p = ForecasterParams.zeros(Arch(1, 2, 3))
    p.head.bias[:] = 0.4
    n_train, _ = SplitSpec().bounds(len(raw))
    lo, hi = raw.values[:n_train].min(), raw.values[:n_train].max()
    ck = tmp_path / "stub.json"
    save_checkpoint(ck, p, DEFAULT_LEVELS, {"min": lo, "max": hi},
                    {"missing_rate": 0.0, "seed": 0, "split": [0.6, 0.2, 0.2]})
    assert main(["evaluate", "--checkpoint", str(ck), "--data", str(data),
                 "--out-dir", str(tmp_path / "e")]) == 0
    report = EvaluationReport.from_dict(json.loads((tmp_path / "e" / "report.json").read_text()))
    assert report.sharpness == 0.0 and report.skill < 0.0
    scaler = MinMax(lo, hi)
    normed = dataclasses.replace(raw, values=scaler.apply(raw.values))
    ref, _ = evaluate_model(p, evaluation_segment(normed, SplitSpec(), 3), DEFAULT_LEVELS)
    assert report.skill == ref.skill and report.reliability == ref.reliability


def test_evaluate_needs_a_checkpoint():
    assert main(["evaluate"]) == 2


# ---------------------------------------------------------------------------
# compare


def fake_report(path, r, s, k):
    rep = EvaluationReport(list(DEFAULT_LEVELS), [0.0] * 19, [0.0] * 19, r, [], [], s, k, 10, 10)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rep.to_json())
    return path


def test_compare_table(tmp_path, capsys):
    a = fake_report(tmp_path / "endtoend" / "report.json", 3.4, 0.05, -0.27)
    b = fake_report(tmp_path / "li" / "report.json", 4.0, 0.04, -0.29)
    out = tmp_path / "table.csv"
    assert main(["compare", str(a), str(b), "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0] == ["method", "R_l_percent", "S_l", "Sk_l", "best"]
    assert [r[0] for r in rows[1:]] == ["endtoend", "li"]
    assert rows[1][4] == "RK" and rows[2][4] == "S"
    text = capsys.readouterr().out.splitlines()
    assert text[0].split() == ["method", "R_l%", "S_l", "Sk_l"] and len(text) == 3


def test_compare_identical_reports_first_wins(tmp_path):
    a = fake_report(tmp_path / "a" / "report.json", 2.0, 0.1, -0.2)
    b = fake_report(tmp_path / "b" / "report.json", 2.0, 0.1, -0.2)
    reps = [(p.parent.name, EvaluationReport.from_dict(json.loads(p.read_text()))) for p in (a, b)]
    rows = compare_reports(reps)
    assert rows[0][4] == "RSK" and rows[1][4] == ""


def test_compare_errors(tmp_path):
    a = fake_report(tmp_path / "a" / "report.json", 2.0, 0.1, -0.2)
    assert main(["compare", str(a)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{\"levels\": []}")
    assert main(["compare", str(a), str(bad)]) == 1
