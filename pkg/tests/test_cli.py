"""End-to-end command surface: exit codes, files, precedence, determinism."""

import csv
import json
import math

import numpy as np
import pytest

import cpoflex.cli as cli
from cpoflex.cli import SWEEP_COLUMNS, main
from cpoflex.model import load_instance, save_instance
from cpoflex.solver import SolverError

from helpers import jump_instance, random_instance

CORPUS = "data/seed_corpus.csv"


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def tiny_corpus(tmp_path, rows):
    src = open(CORPUS, encoding="utf-8").read().splitlines()
    path = tmp_path / "few.csv"
    path.write_text("\n".join(src[:rows + 1]) + "\n")
    return path


# ---------------------------------------------------------------------------
# generate

def test_generate_writes_instance_and_report(tmp_path):
    out = tmp_path / "inst.json"
    code = main(["generate", "--records", CORPUS, "--seed", "3",
                 "--count", "25", "--out", str(out)])
    assert code == 0
    inst = load_instance(out)
    assert inst.num_sessions == 25
    assert inst.power_cap_kw == 700.0
    assert inst.energy_cap_kwh == 8200.0
    assert inst.grid.num_slots == 96
    report = json.loads(out.with_suffix(".report.json").read_text())
    assert report["seed"] == 3
    assert report["kept"] == 25
    assert report["fit"]["nu"] in range(3, 31)
    assert len(report["fit"]["correlation"]) == 3


def test_generate_same_seed_is_byte_identical(tmp_path):
    paths = [tmp_path / "a.json", tmp_path / "b.json"]
    for p in paths:
        assert main(["generate", "--records", CORPUS, "--seed", "5",
                     "--count", "20", "--out", str(p)]) == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (paths[0].with_suffix(".report.json").read_bytes()
            == paths[1].with_suffix(".report.json").read_bytes())


def test_generate_refuses_thin_corpus_with_exit_2(tmp_path, capsys):
    few = tiny_corpus(tmp_path, rows=10)
    code = main(["generate", "--records", str(few), "--out",
                 str(tmp_path / "x.json")])
    assert code == 2
    assert "fit refused" in capsys.readouterr().err


def test_generate_rejects_unknown_policy_key(tmp_path, capsys):
    policy = tmp_path / "p.json"
    policy.write_text(json.dumps({"gamma_floor": 0.5}))
    code = main(["generate", "--records", CORPUS, "--policy", str(policy),
                 "--out", str(tmp_path / "x.json")])
    assert code == 1
    assert "unknown policy keys: gamma_floor" in capsys.readouterr().err


def test_generate_policy_config_reaches_sessions(tmp_path):
    policy = tmp_path / "p.json"
    policy.write_text(json.dumps({"gamma_low": 1.0, "gamma_high": 1.0,
                                  "count": 15}))
    out = tmp_path / "inst.json"
    assert main(["generate", "--records", CORPUS, "--policy", str(policy),
                 "--out", str(out)]) == 0
    inst = load_instance(out)
    assert inst.num_sessions == 15   # config beats the built-in 400
    assert all(s.price_eur_per_kwh == 0.35 for s in inst.sessions)
    assert all(s.gamma == 1.0 for s in inst.sessions)


def test_generate_flag_beats_config(tmp_path):
    policy = tmp_path / "p.json"
    policy.write_text(json.dumps({"count": 15}))
    out = tmp_path / "inst.json"
    assert main(["generate", "--records", CORPUS, "--policy", str(policy),
                 "--count", "7", "--out", str(out)]) == 0
    assert load_instance(out).num_sessions == 7


def test_generate_missing_records_file(tmp_path, capsys):
    code = main(["generate", "--records", str(tmp_path / "absent.csv"),
                 "--out", str(tmp_path / "x.json")])
    assert code == 1
    assert "cannot read records" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# solve

@pytest.fixture()
def instance_file(tmp_path):
    path = tmp_path / "instance.json"
    save_instance(random_instance(0), path)
    return path


def test_solve_writes_all_outputs(tmp_path, instance_file):
    out = tmp_path / "run"
    code = main(["solve", "--instance", str(instance_file), "--gap", "1e-9",
                 "--out", str(out)])
    assert code == 0
    for name in ("schedule.csv", "solution.csv", "settlement.csv",
                 "aggregate.csv", "run.json"):
        assert (out / name).exists()
    meta = json.loads((out / "run.json").read_text())
    assert meta["status"] in ("optimal", "gap-reached")
    assert meta["gap_target_eur"] == 1e-9
    assert meta["num_sessions"] == load_instance(instance_file).num_sessions
    rows = read_csv(out / "settlement.csv")
    assert len(rows) == meta["num_sessions"]
    assert list(rows[0]) == ["id", "H_kwh", "phi_kwh", "Z_eur", "gross_eur",
                             "pi_eur"]


def test_solve_gap_precedence(tmp_path, instance_file):
    config = tmp_path / "solver.json"
    config.write_text(json.dumps({"gap_eur": 0.5}))

    out1 = tmp_path / "r1"
    assert main(["solve", "--instance", str(instance_file), "--config",
                 str(config), "--out", str(out1)]) == 0
    assert json.loads((out1 / "run.json").read_text())["gap_target_eur"] == 0.5

    out2 = tmp_path / "r2"
    assert main(["solve", "--instance", str(instance_file), "--config",
                 str(config), "--gap", "0.25", "--out", str(out2)]) == 0
    assert json.loads((out2 / "run.json").read_text())["gap_target_eur"] == 0.25

    out3 = tmp_path / "r3"
    assert main(["solve", "--instance", str(instance_file), "--out",
                 str(out3)]) == 0
    assert json.loads((out3 / "run.json").read_text())["gap_target_eur"] == 0.01


def test_solve_rejects_invalid_instance(tmp_path, capsys):
    import dataclasses
    inst = random_instance(1)
    bad = dataclasses.replace(
        inst, sessions=(dataclasses.replace(inst.sessions[0], gamma=1.2),)
        + inst.sessions[1:])
    path = tmp_path / "bad.json"
    save_instance(bad, path)
    code = main(["solve", "--instance", str(path), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "invalid" in capsys.readouterr().err


def test_solve_rejects_malformed_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{\"grid\": {}}")
    code = main(["solve", "--instance", str(path), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_solve_node_limit_exits_3(tmp_path, capsys):
    path = tmp_path / "jump.json"
    save_instance(jump_instance(), path)
    out = tmp_path / "limited"
    code = main(["solve", "--instance", str(path), "--gap", "1e-9",
                 "--node-limit", "1", "--out", str(out)])
    assert code == 3
    assert "solver limit" in capsys.readouterr().err
    meta = json.loads((out / "run.json").read_text())
    assert meta["status"] == "limit"
    assert meta["gap_eur"] > 0.0
    # the incumbent is still settled and written
    assert (out / "settlement.csv").exists()


# ---------------------------------------------------------------------------
# sweep

def test_single_row_sweep_matches_solve_aggregates(tmp_path):
    inst = random_instance(4)
    inst_path = tmp_path / "inst.json"
    save_instance(inst, inst_path)

    solve_out = tmp_path / "solved"
    assert main(["solve", "--instance", str(inst_path), "--gap", "1e-9",
                 "--out", str(solve_out)]) == 0
    agg = read_csv(solve_out / "aggregate.csv")[0]

    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "instance": str(inst_path),
        "caps": [[inst.power_cap_kw, inst.energy_cap_kwh]],
        "gap_eur": 1e-9,
    }))
    sweep_out = tmp_path / "swept"
    assert main(["sweep", "--spec", str(spec), "--out", str(sweep_out)]) == 0
    rows = read_csv(sweep_out / "sweep.csv")
    assert len(rows) == 1
    row = rows[0]
    assert list(row) == list(SWEEP_COLUMNS)

    assert float(row["power_cap"]) == inst.power_cap_kw
    assert float(row["energy_cap"]) == inst.energy_cap_kwh
    pairs = [("served_cost_eur", "served_cost_eur"), ("U_eur", "U_eur"),
             ("P_eur", "P_eur"), ("rho_eur", "rho_eur"),
             ("phi_min_kwh", "phi_min_kwh"),
             ("avg_cent_per_kwh", "avg_cent_per_kwh")]
    for sweep_key, agg_key in pairs:
        assert float(row[sweep_key]) == pytest.approx(float(agg[agg_key]),
                                                      abs=1e-6)
    assert float(row["Phi_mwh"]) == pytest.approx(
        float(agg["Phi_kwh"]) / 1000.0, abs=1e-9)


def test_sweep_starving_energy_cap_turns_rho_negative(tmp_path):
    inst_path = tmp_path / "jump.json"
    save_instance(jump_instance(), inst_path)
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({
        "instance": str(inst_path),
        "caps": [[10.0, 100.0], [2.0, 100.0]],
        "gap_eur": 1e-9,
    }))
    out = tmp_path / "swept"
    assert main(["sweep", "--spec", str(spec), "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 2
    # generous caps: full service, nothing unserved, positive net
    assert float(rows[0]["Phi_mwh"]) == pytest.approx(0.0, abs=1e-9)
    assert float(rows[0]["rho_eur"]) > 0.0
    # starved caps: shortfall priced on the curve exceeds the billing
    assert float(rows[1]["Phi_mwh"]) > 0.0
    assert float(rows[1]["rho_eur"]) < 0.0
    assert float(rows[1]["U_eur"]) > float(rows[0]["U_eur"])


def test_sweep_bad_specs_exit_1(tmp_path, capsys):
    inst_path = tmp_path / "inst.json"
    save_instance(random_instance(2), inst_path)

    spec = tmp_path / "empty.json"
    spec.write_text(json.dumps({"instance": str(inst_path), "caps": []}))
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1
    assert "non-empty caps" in capsys.readouterr().err

    spec.write_text(json.dumps({"instance": str(inst_path),
                                "caps": [[0.0, 100.0]]}))
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1
    assert "must be positive" in capsys.readouterr().err

    spec.write_text(json.dumps({"caps": [[1.0, 1.0]]}))
    assert main(["sweep", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1
    assert "needs an instance path" in capsys.readouterr().err


def test_sweep_row_failure_is_recorded_and_sweep_continues(tmp_path, monkeypatch):
    inst_path = tmp_path / "inst.json"
    save_instance(random_instance(6), inst_path)
    real = cli.sweep_row
    calls = []

    def flaky(instance, power_cap, energy_cap, config):
        calls.append((power_cap, energy_cap))
        if len(calls) == 1:
            raise SolverError("injected failure")
        return real(instance, power_cap, energy_cap, config)

    monkeypatch.setattr(cli, "sweep_row", flaky)
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"instance": str(inst_path),
                                "caps": [[5.0, 50.0], [6.0, 60.0]]}))
    out = tmp_path / "swept"
    assert main(["sweep", "--spec", str(spec), "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 2
    assert float(rows[0]["power_cap"]) == 5.0
    assert math.isnan(float(rows[0]["P_eur"]))
    assert not math.isnan(float(rows[1]["P_eur"]))


# ---------------------------------------------------------------------------
# report

@pytest.fixture()
def solved_dir(tmp_path, instance_file):
    out = tmp_path / "solved"
    assert main(["solve", "--instance", str(instance_file), "--out",
                 str(out)]) == 0
    return out


def test_report_emits_four_distribution_tables(tmp_path, solved_dir):
    rep = tmp_path / "rep"
    assert main(["report", "--in", str(solved_dir), "--bins", "12",
                 "--out", str(rep)]) == 0
    for name in ("hist_energy_served.csv", "hist_energy_not_served.csv",
                 "hist_compensation.csv", "hist_final_cost.csv"):
        rows = read_csv(rep / name)
        assert len(rows) == 12
        assert list(rows[0]) == ["bin_left", "bin_right", "pdf", "cdf"]
        assert float(rows[-1]["cdf"]) == pytest.approx(1.0, abs=1e-12)
        cdf = [float(r["cdf"]) for r in rows]
        assert cdf == sorted(cdf)
        assert all(float(r["pdf"]) >= 0.0 for r in rows)
        assert all(float(r["bin_right"]) >= float(r["bin_left"]) for r in rows)


def test_report_rejects_empty_and_missing_inputs(tmp_path, capsys):
    missing = main(["report", "--in", str(tmp_path / "nowhere"), "--out",
                    str(tmp_path / "rep")])
    assert missing == 1
    assert "cannot read" in capsys.readouterr().err

    empty_dir = tmp_path / "empty"
    empty_dir.mkdir()
    (empty_dir / "settlement.csv").write_text(
        "id,H_kwh,phi_kwh,Z_eur,gross_eur,pi_eur\n")
    assert main(["report", "--in", str(empty_dir), "--out",
                 str(tmp_path / "rep")]) == 1
    assert "no sessions" in capsys.readouterr().err

    assert main(["report", "--in", str(empty_dir), "--bins", "0", "--out",
                 str(tmp_path / "rep")]) == 1
    assert "bins must be" in capsys.readouterr().err


def test_tighter_caps_shift_compensation_distribution_up(tmp_path):
    # analogous runs at two capacity levels: the starved one must show
    # strictly more compensation mass
    loose_path = tmp_path / "loose.json"
    tight_path = tmp_path / "tight.json"
    base = jump_instance()
    save_instance(base.with_caps(power_cap_kw=10.0), loose_path)
    save_instance(base, tight_path)
    for path, name in ((loose_path, "loose"), (tight_path, "tight")):
        assert main(["solve", "--instance", str(path), "--gap", "1e-9",
                     "--out", str(tmp_path / name)]) == 0
    loose_z = [float(r["Z_eur"]) for r in read_csv(tmp_path / "loose" / "settlement.csv")]
    tight_z = [float(r["Z_eur"]) for r in read_csv(tmp_path / "tight" / "settlement.csv")]
    assert np.mean(tight_z) > np.mean(loose_z)
