import json
import os

import numpy as np
import pytest

from rsopt import bsde, cli
from rsopt.bsde import TimeGrid
from rsopt.config import RunSpec, load_document, merge_run, model_from_dict, model_hash
from rsopt.constraints import ConstraintSet
from rsopt.errors import ParseError
from rsopt.strategy import value_at

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")
MERTON = os.path.join(CONFIGS, "merton.json")


def write(tmp_path, doc, name="model.json"):
    p = tmp_path / name
    p.write_text(doc if isinstance(doc, str) else json.dumps(doc))
    return str(p)


def base_doc(**over):
    doc = {"horizon": 1.0, "generator": [[-1.0, 1.0], [1.0, -1.0]], "assets": {"m": 1, "n": 1},
           "regimes": [{"r": 0.02, "mu": [0.06], "sigma": [[0.2]], "rho": 0.05}] * 2}
    doc.update(over)
    return doc


# -- config parsing ----------------------------------------------------------------


def test_piecewise_coefficients_parse():
    model = model_from_dict(load_document(os.path.join(CONFIGS, "two_regime.json")))
    c = model.coefficients
    assert list(c.breakpoints) == [0.0, 0.5]
    assert c.mu[0, :, 0].tolist() == [0.07, 0.06]
    assert c.mu[1, :, 0].tolist() == [0.05, 0.05]


def test_parse_errors_name_location(tmp_path):
    doc = base_doc()
    doc["regimes"] = [dict(doc["regimes"][0]), dict(doc["regimes"][0], sigma=[[0.2, 0.1]])]
    with pytest.raises(ParseError, match=r"regimes\[1\]\.sigma"):
        model_from_dict(doc)
    with pytest.raises(ParseError, match="horizon"):
        model_from_dict({k: v for k, v in base_doc().items() if k != "horizon"})
    bad = write(tmp_path, '{"horizon": 1,\n  "generator": [}')
    with pytest.raises(ParseError, match=r"model\.json:2:"):
        load_document(bad)


def test_model_hash_ignores_run_section():
    a = base_doc()
    b = dict(base_doc(), run={"gamma": 0.3})
    assert model_hash(a) == model_hash(b)
    assert model_hash(a) != model_hash(base_doc(horizon=2.0))


def test_flags_win_over_run_section():
    spec = RunSpec("solve", "m", "o", gamma=0.7)
    merged = merge_run(spec, {"gamma": 0.3, "grid_n": 200}, {"gamma"})
    assert merged.gamma == 0.7 and merged.grid_n == 200
    with pytest.raises(ParseError):
        merge_run(spec, {"gridn": 3}, set())


# -- exit codes and artifacts -------------------------------------------------------


def test_solve_writes_value_matching_value_at(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["solve", "--model", MERTON, "--out", str(out), "--grid-n", "400"]) == 0
    names = set(os.listdir(out))
    assert {"summary.json", "value.csv", "value.json", "strategy.csv", "bounds.json", "field_P.csv"} <= names
    model = model_from_dict(load_document(MERTON))
    gamma = load_document(MERTON)["run"]["gamma"]
    P = bsde.solve_power(model, gamma, ConstraintSet.unconstrained(1), TimeGrid(1.0, 400))
    row = (out / "value.csv").read_text().splitlines()[1].split(",")
    assert float(row[2]) == value_at("power", 1.0, 0, {"P": P}, gamma=gamma).value
    summary = json.loads((out / "summary.json").read_text())
    assert "wall_time" not in summary and summary["utility"] == "power"


@pytest.mark.parametrize("doc, argv, code, message", [
    (base_doc(generator=[[-1.0, 0.5], [1.0, -1.0]]), [], 3, "row sum ≠ 0 at regime 1 (row sum -0.5)"),
    ('{"horizon": 1, ', [], 2, "parse error"),
    (base_doc(generator=[[-30.0, 30.0], [1.0, -1.0]]), ["--grid-n", "100"], 4, "use N >= 300"),
    (base_doc(), ["--gamma", "0"], 3, "gamma"),
    (base_doc(), ["--utility", "exp", "--beta", "1", "--constraints", "half-space",
                  "--constraint-params", '{"a": [1.0], "a0": 0.0, "beta0": -1.0}'], 3, "portfolio set"),
])
def test_exit_codes_leave_no_output(tmp_path, capsys, doc, argv, code, message):
    out = tmp_path / "out"
    path = write(tmp_path, doc)
    argv = ["solve", "--model", path, "--out", str(out), "--gamma", "0.5"] + argv
    assert cli.main(argv) == code
    assert not out.exists()
    assert message in capsys.readouterr().err


def test_missing_model_file(tmp_path):
    assert cli.main(["solve", "--model", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_is_parse_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["solve", "--model", MERTON, "--out", str(tmp_path), "--grid-n", "many"])
    assert exc.value.code == 2


def test_verify_failure_exit_5_keeps_report(tmp_path, monkeypatch):
    def failing(*a, **k):
        return [{"name": "forced", "ok": False}]

    monkeypatch.setattr(cli, "transform_checks", failing)
    out = tmp_path / "out"
    path = write(tmp_path, base_doc())
    assert cli.main(["verify", "--model", path, "--out", str(out), "--gamma", "0.5",
                     "--grid-n", "100", "--paths", "2000"]) == 5
    rep = json.loads((out / "verify.json").read_text())
    assert rep["ok"] is False


def test_partial_artifacts_never_land(tmp_path, monkeypatch):
    out = tmp_path / "out"
    out.mkdir()
    (out / "keep.txt").write_text("old")
    real = os.replace
    calls = []

    def flaky(src, dst):
        calls.append(dst)
        if len(calls) == 2:
            raise OSError("disk full")
        return real(src, dst)

    monkeypatch.setattr(os, "replace", flaky)
    code = cli.main(["solve", "--model", MERTON, "--out", str(out), "--grid-n", "100"])
    assert code == 1
    assert os.listdir(out) == ["keep.txt"]
    assert (out / "keep.txt").read_text() == "old"


def test_sweep_and_simulate(tmp_path):
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--model", MERTON, "--out", str(out), "--grid-n", "200",
                     "--sweep", "gamma=-1,0.3,0.5"]) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "gamma,value,lower,upper" and len(lines) == 4
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "--model", MERTON, "--out", str(sim), "--grid-n", "200",
                     "--paths", "1000", "--seed", "5"]) == 0
    res = json.loads((sim / "sim.json").read_text())
    assert res["n_paths"] == 1000 and res["n_excluded"] == 0


def test_verify_identical_regimes_byte_identical(tmp_path):
    cfg = os.path.join(CONFIGS, "identical_two_regime.json")
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert cli.main(["verify", "--model", cfg, "--out", str(d), "--paths", "4000"]) == 0
    for name in os.listdir(dirs[0]):
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
    vals = np.loadtxt(dirs[0] / "value.csv", delimiter=",", skiprows=1)
    assert vals[0, 2] == vals[1, 2]
