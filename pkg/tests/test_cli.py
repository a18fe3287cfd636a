from __future__ import annotations

import csv
import hashlib
import json

import numpy as np
import pytest

from meanfield.cli import CONFIG_SCHEMA, build_parser, main
from meanfield.dynamics import TimeGrid
from meanfield.relaxed import RelaxedControl
from meanfield.superposition import MarginalPath
from meanfield.system import ControlSet


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_help_documents_schema(capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert '"subcommand"' in out and "MEANFIELD_THREADS" in out
    assert json.dumps(CONFIG_SCHEMA, indent=2) in out


def test_simulate_zero_field_constant_rows(tmp_path):
    out = tmp_path / "sim"
    code = main(["simulate", "--system", "decoupled", "--control", "zero", "--n", "4", "--d", "2", "--K", "3", "--out", str(out)])
    assert code == 0
    rows = read_csv(out / "trajectory.csv")
    assert len(rows) == 4 * 4
    for i in range(4):
        xs = {(r["x1"], r["x2"]) for r in rows if r["particle"] == str(i)}
        assert len(xs) == 1
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 0 and set(man["versions"]) >= {"numpy", "scipy", "python", "meanfield"}
    assert man["outputs"]["trajectory.csv"] == hashlib.sha256((out / "trajectory.csv").read_bytes()).hexdigest()


def test_barycenter_singleton(tmp_path):
    assert main(["barycenter", "--n", "1", "--out", str(tmp_path)]) == 0
    row = read_csv(tmp_path / "report.csv")[0]
    assert float(row["value"]) == pytest.approx(0.5, abs=1e-9)
    assert float(row["reference"]) == 0.5
    assert (tmp_path / "history.csv").exists()


def test_malformed_json_exit_2_no_files(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{\n  "subcommand": "optimize",\n  "N": 4,\n}\n')
    out = tmp_path / "out"
    assert main(["optimize", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    err = capsys.readouterr().err
    assert "bad.json:4" in err


def test_schema_violation_line_reference(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "subcommand": "optimize",\n  "K": 3,\n  "optimizer": {\n    "backtrack": 1.5\n  }\n}\n')
    out = tmp_path / "out"
    assert main(["optimize", "--config", str(cfg), "--out", str(out)]) == 2
    err = capsys.readouterr().err
    assert "c.json:5" in err and "backtrack" in err
    assert not out.exists()


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"subcommand": "simulate", "bogus": 1}))
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "bogus" in capsys.readouterr().err


def test_blow_up_exit(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    # an enormous attraction strength overflows the explicit stages
    cfg.write_text(json.dumps({"subcommand": "simulate", "system": {"id": "attraction", "strength": 1e300}, "N": 3, "K": 2, "T": 10.0}))
    out = tmp_path / "o"
    with np.errstate(all="ignore"):
        code = main(["simulate", "--config", str(cfg), "--out", str(out)])
    assert code == 3
    assert "dynamics" in capsys.readouterr().err
    assert not out.exists()


def test_reproducible_outputs(tmp_path):
    args = ["optimize", "--system", "attraction", "--n", "3", "--K", "2", "--max-iters", "10", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["outputs"] == mb["outputs"] and ma["config_hash"] == mb["config_hash"]
    for name in ma["outputs"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "runtime" not in (tmp_path / "a" / "report.csv").read_text()


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"subcommand": "simulate", "N": 2, "K": 2, "seed": 1}))
    assert main(["simulate", "--config", str(cfg), "--n", "5", "--out", str(tmp_path / "o")]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["N"] == 5 and man["config"]["seed"] == 1
    assert len(read_csv(tmp_path / "o" / "trajectory.csv")) == 5 * 3


def test_chatter_round_trip(tmp_path):
    cs = ControlSet.box([-1.0], [1.0])
    sigma = RelaxedControl.from_entries(TimeGrid(1.0, 2), [[([[-1.0], [1.0]], [1 / 3, 2 / 3])], [([[0.5]], [1.0])]], cs)
    src = tmp_path / "sigma.json"
    src.write_text(json.dumps(sigma.to_json()))
    assert main(["chatter", "--input", str(src), "--m", "3", "--out", str(tmp_path / "o")]) == 0
    ctrl = json.loads((tmp_path / "o" / "control.json").read_text())
    assert ctrl["K"] == 6
    assert [v[0][0] for v in ctrl["values"]] == [-1.0, 1.0, 1.0, 0.5, 0.5, 0.5]


def test_chatter_bad_weights(tmp_path):
    src = tmp_path / "sigma.json"
    obj = {"T": 1.0, "K": 1, "control_set": {"kind": "box", "lower": [0.0], "upper": [1.0]},
           "entries": [[{"atoms": [[0.0], [1.0]], "weights": [0.5, 0.6]}]]}
    src.write_text(json.dumps(obj))
    assert main(["chatter", "--input", str(src), "--m", "2", "--out", str(tmp_path / "o")]) == 2


def test_superpose_subcommand(tmp_path):
    t = np.linspace(0, 1, 9)
    states = np.stack([np.column_stack([t, 0 * t]), np.column_stack([t, 1 + 0 * t])], axis=1)
    MarginalPath.from_states(1.0, states).to_csv(tmp_path / "p.csv")
    out = tmp_path / "o"
    assert main(["superpose", "--input", str(tmp_path / "p.csv"), "--plot", "--out", str(out)]) == 0
    ident = read_csv(out / "length_identity.csv")[0]
    assert abs(float(ident["gap"])) <= 1e-12
    assert (out / "curves.svg").read_text().startswith("<svg")
    assert len(read_csv(out / "curves.csv")) == 2 * 9


def test_gamma_subcommand(tmp_path):
    out = tmp_path / "g"
    assert main(["gamma", "--benchmark", "counterexample", "--k", "4,8", "--plot", "--out", str(out)]) == 0
    rows = read_csv(out / "gamma.csv")
    assert [int(r["N"]) for r in rows] == [16, 64]
    assert "runtime" not in rows[0]
    assert (out / "gamma.svg").exists()
    man = json.loads((out / "manifest.json").read_text())
    assert "runtime_N16" in man["timing"]


def test_bad_flag_value_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gamma", "--k", "4,x"])
    assert exc.value.code == 2


def test_constructor_error_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"subcommand": "optimize", "system": {"id": "barycenter", "p": 1}}))
    assert main(["optimize", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "invalid configuration" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()
