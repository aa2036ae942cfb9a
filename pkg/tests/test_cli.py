import csv
import json
import subprocess
import sys

import pytest

from eimlab.cli import main
from eimlab.config import ConfigError, config_hash, validate
from eimlab.experiments import grid_points

EDIT = {"scene": {"color": "red", "object": "square"}, "edits": [{"attribute": "color", "target": "blue"}],
        "iterations": 10}
SDE = {"scenes": 4, "batches": 2, "strength": 0.55}
THEORY = {"m": [1, 2], "d": [4], "alpha": [1.0], "samples": 20000, "spot_samples": 20000}


def run(tmp_path, command, cfg, *extra, name="out"):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / name
    code = main([command, "--config", str(path), "--out", str(out), *extra])
    return code, out


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_unknown_key_exit_2(tmp_path, capsys):
    code, _ = run(tmp_path, "theory", {"bogus_knob": 1})
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "bogus_knob" in err["message"]


def test_bad_target_and_jobs(tmp_path):
    bad = {**EDIT, "edits": [{"attribute": "color", "target": "purple"}]}
    assert run(tmp_path, "edit", bad)[0] == 2
    assert run(tmp_path, "theory", THEORY, "--jobs", "0", name="j")[0] == 2
    assert main(["theory", "--config", str(tmp_path / "missing.json")]) == 2


def test_empty_grid():
    with pytest.raises(ValueError):
        grid_points({})
    with pytest.raises(ValueError):
        grid_points({"lam": []})
    with pytest.raises(ConfigError):
        validate("sweep", {"base": {"command": "edit", **EDIT}, "grid": {}})


def test_hash_covers_defaults():
    a = validate("theory", {})
    b = validate("theory", {"samples": 100000})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(validate("theory", {"samples": 200000}))


def test_theory_run(tmp_path):
    code, out = run(tmp_path, "theory", THEORY)
    assert code == 0
    table = rows(out / "prop1.csv")
    head = table[0]
    for r in table[1:]:
        rec = dict(zip(head, r))
        assert abs(float(rec["estimate"]) - float(rec["analytic"])) <= 4 * float(rec["stderr"])
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "theory" and "prop1.csv" in man["outputs"]
    assert (out / "prop1_summary.txt").exists() and (out / "prop2.csv").exists()


def test_rerun_byte_identical(tmp_path):
    _, a = run(tmp_path, "edit", EDIT, "--deterministic", name="a")
    _, b = run(tmp_path, "edit", EDIT, "--deterministic", name="b")
    for f in ("edits.csv", "hsds_trace_s0.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    ma = json.loads((a / "manifest.json").read_text())["outputs"]
    mb = json.loads((b / "manifest.json").read_text())["outputs"]
    assert {k: v for k, v in ma.items() if k != "config.json"} == {k: v for k, v in mb.items() if k != "config.json"}


def test_jobs_order_normalized(tmp_path):
    _, a = run(tmp_path, "sde", SDE, "--jobs", "1", name="a")
    _, b = run(tmp_path, "sde", SDE, "--jobs", "4", name="b")
    assert sorted(rows(a / "sde.csv")) == sorted(rows(b / "sde.csv"))


def test_default_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("EIMLAB_OUT", str(tmp_path / "root"))
    cfg = tmp_path / "t.json"
    cfg.write_text(json.dumps(THEORY))
    assert main(["theory", "--config", str(cfg)]) == 0
    dirs = list((tmp_path / "root").iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("theory-")
    json.loads((dirs[0] / "manifest.json").read_text())


def test_lambda_sweep(tmp_path):
    cfg = {"base": {"command": "edit", **EDIT}, "grid": {"lam": [0.1, 0.3, 0.5, 0.7, 1.0]}}
    code, out = run(tmp_path, "sweep", cfg, "--jobs", "2")
    assert code == 0
    table = rows(out / "combined.csv")
    assert len(table) == 1 + 5
    assert [r[1] for r in table[1:]] == ["0.1", "0.3", "0.5", "0.7", "1.0"]
    assert all(r[-1] == "ok" for r in rows(out / "status.csv")[1:])
    assert (out / "sweep.svg").exists()


def test_alpha_sweep_monotone(tmp_path):
    cfg = {"base": {"command": "edit", **EDIT, "edits": [{"attribute": "size", "target": "large"}]},
           "grid": {"alpha": [0.2, 0.4, 0.6, 0.8, 1.0]}}
    _, out = run(tmp_path, "sweep", cfg)
    table = rows(out / "combined.csv")
    col = table[0].index("edited_size")
    vals = [float(r[col]) for r in table[1:]]
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_runtime_failure_exit_1(tmp_path, capsys):
    cfg = {"model": "toy-joint", "model_path": str(tmp_path / "nope.bin"), **EDIT}
    code, out = run(tmp_path, "edit", cfg)
    assert code == 1
    doc = json.loads((out / "error.json").read_text())
    assert {"error", "stage", "message", "traceback"} <= set(doc)


def test_console_script(tmp_path):
    res = subprocess.run([sys.executable, "-m", "eimlab.cli", "theory", "--print-schema"],
                         capture_output=True, text=True, check=True)
    assert "spot_samples" in json.loads(res.stdout)["properties"]
