import csv
import json
from pathlib import Path

import pytest

from cwa_lab import theory
from cwa_lab.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
BUNDLED_DATA = CONFIGS / "bundled" / "data.json"
BUNDLED_ZOO = CONFIGS / "bundled" / "zoo"


def run(argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:          # argparse usage errors
        return exc.code


def test_gen_data_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "sub" / "b.json"
    assert run(["gen-data", "--spec", CONFIGS / "dataset.json", "--out", a]) == EXIT_OK
    assert run(["gen-data", "--spec", CONFIGS / "dataset.json", "--out", b]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    assert "config_hash=" in capsys.readouterr().out
    assert json.loads(a.read_text())["spec"]["seed"] == 0


def test_gen_data_seed_flag_overrides_file(tmp_path):
    out = tmp_path / "d.json"
    assert run(["gen-data", "--spec", CONFIGS / "dataset.json", "--out", out, "--seed", 5]) == EXIT_OK
    assert json.loads(out.read_text())["spec"]["seed"] == 5


def test_gen_data_usage_and_bad_spec(tmp_path):
    assert run(["gen-data", "--out", tmp_path / "x.json"]) == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"K": 1}))
    assert run(["gen-data", "--spec", bad, "--out", tmp_path / "x.json"]) == EXIT_USAGE
    assert run(["gen-data", "--spec", tmp_path / "none.json", "--out", tmp_path / "x.json"]) == EXIT_FAIL


def test_train_zoo_then_attack(tmp_path):
    data = tmp_path / "d.json"
    spec = json.loads((CONFIGS / "dataset.json").read_text()) | {"per_class": 40}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert run(["gen-data", "--spec", tmp_path / "spec.json", "--out", data]) == EXIT_OK
    assert run(["train-zoo", "--data", data, "--epochs", 5, "--out", tmp_path / "zoo"]) == EXIT_OK
    assert (tmp_path / "zoo" / "zoo.json").is_file()
    assert json.loads((tmp_path / "zoo" / "train_config.json").read_text())["seed"] == 0
    out = tmp_path / "t.json"
    assert run(["attack", "--algo", "mi", "--zoo", tmp_path / "zoo", "--data", data, "--points", 10,
                "--out", out]) == EXIT_OK
    assert json.loads(out.read_text())["nfe"] == 40


def test_attack_mi_cwa_on_bundled_zoo(tmp_path, capsys):
    out = tmp_path / "trace.json"
    code = run(["attack", "--algo", "mi-cwa", "--T", 10, "--zoo", BUNDLED_ZOO, "--data", BUNDLED_DATA,
                "--points", 20, "--seed", 3, "--out", out])
    assert code == EXIT_OK
    trace = json.loads(out.read_text())
    assert trace["nfe"] == 20 * 4
    assert trace["seed"] == 3 and trace["resolved_config"]["attack"]["T"] == 10
    assert trace["max_budget_violation"] <= 1e-12
    assert "nfe=80" in capsys.readouterr().out


def test_attack_flags_override_config_file(tmp_path):
    out = tmp_path / "trace.json"
    assert run(["attack", "--algo", "mi", "--config", CONFIGS / "attack.json", "--T", 3, "--zoo", BUNDLED_ZOO,
                "--data", BUNDLED_DATA, "--points", 5, "--out", out]) == EXIT_OK
    res = json.loads(out.read_text())["resolved_config"]["attack"]
    assert res["T"] == 3 and res["eps"] == pytest.approx(16 / 255)


def test_attack_missing_zoo(tmp_path):
    assert run(["attack", "--algo", "mi", "--zoo", tmp_path, "--data", BUNDLED_DATA,
                "--out", tmp_path / "t.json"]) == EXIT_FAIL
    assert run(["attack", "--algo", "pgd", "--zoo", BUNDLED_ZOO, "--data", BUNDLED_DATA,
                "--out", tmp_path / "t.json"]) == EXIT_USAGE


def test_campaign_with_bundled_config(tmp_path, capsys):
    out, table = tmp_path / "rep.json", tmp_path / "out" / "rep.csv"
    code = run(["campaign", "--config", CONFIGS / "campaign.json", "--data", BUNDLED_DATA, "--zoo", BUNDLED_ZOO,
                "--out", out, "--csv", table, "--jobs", 2])
    assert code == EXIT_OK
    with open(table) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 1 + 6 * 8
    rep = json.loads(out.read_text())
    assert rep["config"]["extra"]["resolved"]["seed"] == 0
    assert "config_hash=" in capsys.readouterr().out


def test_campaign_reproducible(tmp_path):
    argv = ["campaign", "--data", BUNDLED_DATA, "--zoo", BUNDLED_ZOO, "--attacks", "mi,mi-cwa", "--points", 30]
    assert run(argv + ["--out", tmp_path / "a.json"]) == EXIT_OK
    assert run(argv + ["--out", tmp_path / "b.json", "--jobs", 1]) == EXIT_OK
    a, b = (json.loads((tmp_path / f).read_text()) for f in ("a.json", "b.json"))
    assert a["rows"] == b["rows"] and a["config_hash"] == b["config_hash"]


def test_sweep_and_report(tmp_path):
    out = tmp_path / "sw.json"
    assert run(["sweep", "--param", "T", "--grid", "1,5,10,20", "--attacks", "mi-cwa", "--data", BUNDLED_DATA,
                "--zoo", BUNDLED_ZOO, "--points", 20, "--out", out]) == EXIT_OK
    table = tmp_path / "sw.csv"
    assert run(["report", "--in", out, "--csv", table]) == EXIT_OK
    with open(table) as fh:
        assert len(list(csv.reader(fh))) == 1 + 4


def test_sweep_rejects_unknown_parameter(tmp_path):
    assert run(["sweep", "--param", "gamma", "--grid", "1", "--out", tmp_path / "x.json"]) == EXIT_USAGE


def test_report_errors(tmp_path):
    assert run(["report", "--in", tmp_path / "missing.json", "--csv", tmp_path / "x.csv"]) == EXIT_FAIL
    broken = tmp_path / "broken.json"
    broken.write_text('{"kind": "campaign", "rows": [')
    assert run(["report", "--in", broken, "--csv", tmp_path / "x.csv"]) == EXIT_FAIL


def test_verify_theory_holder(tmp_path, capsys):
    out = tmp_path / "v.json"
    assert run(["verify-theory", "--check", "holder", "--trials", 1000, "--out", out]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["all_passed"] and rep["seed"] == 0
    assert rep["results"][0]["instances"] == 1000
    assert "holder" in capsys.readouterr().out


def test_verify_theory_usage_errors():
    assert run(["verify-theory", "--check", "unknown"]) == EXIT_USAGE
    assert run(["verify-theory", "--trials", 0]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE


def test_verify_theory_failure_names_worst_instance(monkeypatch, capsys):
    def broken(seed=0, instances=10):
        return {"check": "holder", "instances": instances, "pass_rate": 0.9, "worst_slack": -0.5,
                "worst_instance": [seed, 7], "seed": seed}
    monkeypatch.setitem(theory.STUDIES, "holder", broken)
    assert run(["verify-theory", "--check", "holder", "--seed", 4]) == EXIT_FAIL
    assert "[4, 7]" in capsys.readouterr().err


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "cwa_lab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "verify-theory" in res.stdout
