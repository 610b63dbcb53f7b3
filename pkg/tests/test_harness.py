import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drcons import cli, control, harness
from drcons.errors import InvalidInputError
from drcons.harness import ResultRow, Scenario

SMALL_KNOWN = {
    "id": "small-known",
    "kind": "known",
    "system": {"dx": 3, "du": 1, "dy": 2, "rho_open": 0.8},
    "params": {"T": [200, 400], "m": 3, "h": 3, "lam": 1.0},
    "seeds": [0, 1],
}


# -- scenarios -----------------------------------------------------------------

def test_scenario_defaults_and_echo():
    cfg = Scenario.from_dict(SMALL_KNOWN)
    assert cfg.disturbance["kind"] == "mixed" and cfg.params["eta"] is None
    echo = cfg.resolved()
    assert echo["params"]["T"] == [200, 400] and echo["seeds"] == [0, 1]
    json.dumps(echo)


def test_scenario_validation():
    with pytest.raises(InvalidInputError):
        Scenario.from_dict({"kind": "nope"})
    with pytest.raises(InvalidInputError):
        Scenario.from_dict({"kind": "known", "colour": 1})
    with pytest.raises(InvalidInputError):
        Scenario.from_dict({"kind": "known", "params": {"T": [0]}})


@pytest.mark.parametrize("name", ["known_regret", "sensitivity", "unknown_regret", "tradeoff_mu", "tradeoff_T",
                                  "diag_kappa", "diag_covariance", "diag_gradcheck", "diag_projection"])
def test_builtin_scenarios_load(name):
    cfg = harness.builtin_scenario(name)
    assert cfg.seeds and harness._cells(cfg)


def test_explicit_matrix_system():
    spec = {"A": [[0.5]], "B": [[1.0]], "C": [[1.0]], "K": [[-0.2]]}
    cfg = Scenario.from_dict({"kind": "known", "system": spec, "params": {"T": [50], "m": 2, "h": 2, "lam": 1.0}})
    rows = harness.run_scenario(cfg)
    assert len(rows) == 1 and rows[0].ok


# -- running -------------------------------------------------------------------

def test_empty_seeds():
    assert harness.run_scenario(dict(SMALL_KNOWN, seeds=[])) == []
    assert harness.run_scenario({"kind": "tradeoff", "seeds": []}) == []


def test_single_cell_passes_ledger_through():
    cfg = Scenario.from_dict(dict(SMALL_KNOWN, seeds=[1], params=dict(SMALL_KNOWN["params"], T=[300])))
    [row] = harness.run_scenario(cfg)
    sys = harness.build_system(cfg.system, 1)
    run = control.drc_ons_run(sys, harness._losses(cfg, sys, 300, 1), harness._gen(cfg, 1), 300, m=3, h=3, lam=1.0)
    assert row.memory_reg == run.summary.memory_reg
    assert row.oco_reg == run.summary.oco_reg and row.control_reg == run.control_reg


def test_deterministic_csv_and_parallel_equivalence():
    cfg = Scenario.from_dict(SMALL_KNOWN)
    a = harness.write_csv(harness.run_scenario(cfg))
    b = harness.write_csv(harness.run_scenario(cfg))
    assert a == b
    assert harness.write_csv(harness.run_scenario(cfg, jobs=2)) == a


def test_failed_cell_is_reported():
    # K = 1 does not stabilize A = 0.5 with B = C = 1 (closed loop 1.5)
    spec = {"A": [[0.5]], "B": [[1.0]], "C": [[1.0]], "K": [[1.0]]}
    rows = harness.run_scenario({"kind": "known", "system": spec, "params": {"T": [50]}, "seeds": [0, 1]})
    assert len(rows) == 2 and all(r.status == "failed" and "stabilize" in r.reason for r in rows)


def test_tradeoff_rows():
    cfg = {"kind": "tradeoff", "params": {"T": [512], "mu": [1.0], "lam_grid": {"n": 3, "decades": 1.0}},
           "seeds": [0, 1]}
    rows = harness.run_scenario(cfg)
    assert len(rows) == 2 * 4
    assert {r.algo for r in rows} == {"ons", "semi-ons"}
    for r in rows:
        assert r.regmu == pytest.approx(r.oco_reg + r.mu * r.euc_cost)


def test_diagnostics_rows():
    rows = harness.run_scenario({"kind": "diagnostics", "params": {"check": "gradcheck", "n_instances": 5},
                                 "seeds": [0]})
    assert len(rows) == 5 and all(r.metric == "grad_rel_err" and r.value < 1e-5 for r in rows)


# -- CSV -----------------------------------------------------------------------

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)
text = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\r\x00"), max_size=20)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.builds(ResultRow, scenario=text, kind=text, algo=text, seed=st.integers(0, 2**31),
                          T=st.integers(0, 2**20), mu=finite, eps=finite, lam=finite, memory_reg=finite,
                          oco_reg=finite, control_reg=finite, euc_cost=finite, adap_cost=finite,
                          move_diff=finite, eps_G=finite, regmu=finite, metric=text, value=finite,
                          status=st.sampled_from(["ok", "failed"]), reason=text), max_size=5))
def test_csv_round_trip(rows):
    assert harness.read_csv(harness.write_csv(rows)) == rows


def test_csv_file_round_trip(tmp_path):
    rows = harness.run_scenario(SMALL_KNOWN)
    path = str(tmp_path / "out.csv")
    harness.write_outputs(rows, Scenario.from_dict(SMALL_KNOWN), path)
    assert harness.read_csv(path) == rows
    side = json.load(open(path + ".config.json"))
    assert side["scenario"]["id"] == "small-known" and len(side["wall_time"]) == len(rows)
    assert "wall_time" in harness.write_csv(rows, timing=True).splitlines()[0]


# -- slope fitting -------------------------------------------------------------

def test_slope_identity():
    slope, icpt, r2 = harness.slope_fit([(x, x) for x in (1.0, 2.0, 5.0, 11.0)])
    assert abs(slope - 1) <= 1e-10 and abs(icpt) <= 1e-10 and r2 == pytest.approx(1.0)


def test_slope_sqrt():
    assert abs(harness.slope_fit([(4, 2), (16, 4), (64, 8)])[0] - 0.5) <= 1e-10


def test_slope_noisy_two_thirds():
    rng = np.random.default_rng(0)
    xs = np.logspace(1, 5, 20)
    ys = xs ** (2 / 3) * (1 + 0.01 * rng.standard_normal(20))
    assert abs(harness.slope_fit(zip(xs, ys))[0] - 2 / 3) <= 0.02


def test_slope_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        harness.slope_fit([(1, 1), (2, -1), (3, 1)])
    with pytest.raises(InvalidInputError):
        harness.slope_fit([(1, 1), (2, 2)])


# -- CLI -----------------------------------------------------------------------

def test_cli_run_and_formats(tmp_path, capsys):
    import yaml

    path = tmp_path / "s.yaml"
    path.write_text(yaml.safe_dump(SMALL_KNOWN))
    out = tmp_path / "r.csv"
    assert cli.main(["run", str(path), "--out", str(out), "--jobs", "1"]) == 0
    assert len(harness.read_csv(str(out))) == 4
    assert cli.main(["run", str(path), "--seed", "1", "--format", "json", "--jobs", "1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert {r["seed"] for r in doc["rows"]} == {1}


def test_cli_exit_codes(tmp_path):
    import yaml

    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"kind": "known", "system": {"A": [[0.5]], "B": [[1.0]], "C": [[1.0]],
                                                              "K": [[1.0]]}, "params": {"T": [20]}}))
    assert cli.main(["run", str(bad), "--jobs", "1"]) == 1


def test_cli_diag(capsys):
    assert cli.main(["diag", "gradcheck", "--seed", "0", "--jobs", "1"]) == 0
    assert "ok" in capsys.readouterr().out
