"""Command-line surface for the scheduling pipeline.

Four subcommands cover the whole workflow: ``generate`` fits the dependence
model to historical records and emits a synthetic instance, ``solve`` runs
the exact scheduler and settles the result, ``sweep`` re-solves one instance
over a ladder of operator capacity pairs, and ``report`` turns a solve
directory into plot-ready distribution tables.

Exit codes are stable for scripting: 0 success, 1 I/O or validation failure,
2 dependence-fit refusal, 3 solver limit reached.  Configuration files are
JSON and every configurable value obeys flag > config > default.  The only
environment control is CPOFLEX_LOG, which sets log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from datetime import datetime
from pathlib import Path

import numpy as np

from .datagen import (FitRefusalError, GenPolicy, RecordFormatError,
                      fit_copula, generate_sessions, load_records)
from .model import (Instance, InstanceFormatError, SettlementError, TimeGrid,
                    load_instance, save_instance, settle, validate,
                    write_aggregate_csv, write_settlement_csv)
from .solver import (BnbConfig, LIMIT, SolverError, build_model, run_metadata,
                     solve, verify_solution, write_schedule_csv,
                     write_solution_csv)

log = logging.getLogger("cpoflex")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_FIT_REFUSED = 2
EXIT_SOLVER_LIMIT = 3

SWEEP_COLUMNS = ("power_cap", "energy_cap", "served_cost_eur", "U_eur",
                 "P_eur", "rho_eur", "phi_min_kwh", "Phi_mwh",
                 "avg_cent_per_kwh")
REPORT_SOURCES = (
    ("hist_energy_served.csv", "H_kwh"),
    ("hist_energy_not_served.csv", "phi_kwh"),
    ("hist_compensation.csv", "Z_eur"),
    ("hist_final_cost.csv", "pi_eur"),
)

_GEN_DEFAULTS = {
    "count": 400,
    "power_cap_kw": 700.0,
    "energy_cap_kwh": 8200.0,
    "delta_t_hours": 0.25,
    "num_slots": 96,
    "grid_start": "2024-01-08T00:00:00",
}
_POLICY_KEYS = frozenset(GenPolicy.__dataclass_fields__) | set(_GEN_DEFAULTS)


class CliError(Exception):
    """Input-level failure; message goes to stderr, exit code 1."""


def _setup_logging() -> None:
    name = os.environ.get("CPOFLEX_LOG", "warning").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return doc


def _pick(flag, config: dict, key: str, default):
    """flag > config > default."""
    if flag is not None:
        return flag
    if key in config:
        return config[key]
    return default


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    config = _load_json_config(args.policy)
    unknown = set(config) - _POLICY_KEYS
    if unknown:
        raise CliError(f"unknown policy keys: {', '.join(sorted(unknown))}")

    policy_kwargs = {k: config[k] for k in GenPolicy.__dataclass_fields__
                     if k in config}
    try:
        policy = GenPolicy(**policy_kwargs)
    except TypeError as exc:
        raise CliError(f"bad policy value: {exc}") from exc

    count = int(_pick(args.count, config, "count", _GEN_DEFAULTS["count"]))
    power_cap = float(_pick(args.power_cap_kw, config, "power_cap_kw",
                            _GEN_DEFAULTS["power_cap_kw"]))
    energy_cap = float(_pick(args.energy_cap_kwh, config, "energy_cap_kwh",
                             _GEN_DEFAULTS["energy_cap_kwh"]))
    try:
        start = datetime.fromisoformat(str(
            config.get("grid_start", _GEN_DEFAULTS["grid_start"])))
    except ValueError as exc:
        raise CliError(f"grid_start not ISO-8601: {exc}") from exc
    grid = TimeGrid(
        delta_t_hours=float(config.get("delta_t_hours",
                                       _GEN_DEFAULTS["delta_t_hours"])),
        num_slots=int(config.get("num_slots", _GEN_DEFAULTS["num_slots"])),
        start=start,
    )

    try:
        data = load_records(args.records)
    except OSError as exc:
        raise CliError(f"cannot read records {args.records}: {exc}") from exc
    except RecordFormatError as exc:
        raise CliError(f"records {args.records}: {exc}") from exc

    model, fit = fit_copula(data)
    log.info("fitted nu=%d on %d records", fit.nu, fit.n_records)

    sessions, gen = generate_sessions(model, count, args.seed, grid, policy)
    instance = Instance(grid=grid, sessions=tuple(sessions),
                        power_cap_kw=power_cap, energy_cap_kwh=energy_cap)
    report = validate(instance)
    if not report.ok:
        raise CliError(f"generated instance failed validation:\n{report}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_instance(instance, out)
    report_doc = {
        "seed": args.seed,
        "requested": gen.requested,
        "kept": gen.kept,
        "snap_failures": gen.snap_failures,
        "sample_rounds": gen.rounds,
        "fit": {
            "n_records": fit.n_records,
            "nu": fit.nu,
            "kendall_tau": fit.tau.tolist(),
            "correlation": fit.corr.tolist(),
            "columns": list(model.columns),
        },
        "policy": {k: getattr(policy, k) for k in GenPolicy.__dataclass_fields__},
        "power_cap_kw": power_cap,
        "energy_cap_kwh": energy_cap,
    }
    report_path = out.with_suffix(".report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("wrote %s and %s", out, report_path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve

def _solve_instance(instance: Instance, config: BnbConfig):
    model = build_model(instance)
    result = solve(model, config)
    residuals = verify_solution(instance, result)
    if not residuals.ok():
        name, value = residuals.worst
        raise SolverError(f"solution failed verification: {name} residual {value!r}")
    return result


def cmd_solve(args) -> int:
    config = _load_json_config(args.config)
    gap = float(_pick(args.gap, config, "gap_eur", 0.01))
    node_limit = int(_pick(args.node_limit, config, "node_limit", 1_000_000))
    time_limit = _pick(args.time_limit_s, config, "time_limit_s", None)

    try:
        instance = load_instance(args.instance)
    except OSError as exc:
        raise CliError(f"cannot read instance {args.instance}: {exc}") from exc
    except InstanceFormatError as exc:
        raise CliError(f"instance {args.instance}: {exc}") from exc
    report = validate(instance)
    if not report.ok:
        raise CliError(f"instance {args.instance} invalid:\n{report}")

    bnb = BnbConfig(gap_eur=gap, node_limit=node_limit,
                    time_limit_s=None if time_limit is None else float(time_limit))
    result = _solve_instance(instance, bnb)
    settlement = settle(instance, result.schedule, result.phi, result.z)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_schedule_csv(instance, result, out / "schedule.csv")
    write_solution_csv(instance, result, out / "solution.csv")
    write_settlement_csv(settlement, out / "settlement.csv")
    write_aggregate_csv(settlement, out / "aggregate.csv")
    meta = run_metadata(result, gap)
    meta["instance"] = str(args.instance)
    meta["num_sessions"] = instance.num_sessions
    meta["power_cap_kw"] = instance.power_cap_kw
    meta["energy_cap_kwh"] = instance.energy_cap_kwh
    with open(out / "run.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")

    log.info("status %s, objective %.6f, gap %.6f, nodes %d",
             result.status, result.objective, result.gap, result.nodes)
    if result.status == LIMIT:
        print(f"solver limit reached: bound gap {result.gap!r} EUR after "
              f"{result.nodes} nodes", file=sys.stderr)
        return EXIT_SOLVER_LIMIT
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep

def _sweep_caps(doc: dict) -> list[tuple[float, float]]:
    raw = doc.get("caps")
    if not isinstance(raw, list) or not raw:
        raise CliError("sweep spec needs a non-empty caps list")
    pairs = []
    for i, row in enumerate(raw):
        if isinstance(row, dict):
            try:
                pair = (float(row["power_cap_kw"]), float(row["energy_cap_kwh"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise CliError(f"caps[{i}]: {exc!r}") from exc
        elif isinstance(row, (list, tuple)) and len(row) == 2:
            try:
                pair = (float(row[0]), float(row[1]))
            except (TypeError, ValueError) as exc:
                raise CliError(f"caps[{i}]: {exc!r}") from exc
        else:
            raise CliError(f"caps[{i}] must be [power_cap_kw, energy_cap_kwh]")
        if not (pair[0] > 0 and pair[1] > 0):
            raise CliError(f"caps[{i}] must be positive, got {pair}")
        pairs.append(pair)
    return pairs


def sweep_row(instance: Instance, power_cap: float, energy_cap: float,
              config: BnbConfig) -> dict:
    """Metrics for one cap pair; field names follow the sweep CSV columns."""
    modified = instance.with_caps(power_cap_kw=power_cap,
                                  energy_cap_kwh=energy_cap)
    result = _solve_instance(modified, config)
    report = settle(modified, result.schedule, result.phi, result.z)
    return {
        "power_cap": power_cap,
        "energy_cap": energy_cap,
        "served_cost_eur": float(report.total_gross_eur),
        "U_eur": float(report.total_compensation_eur),
        "P_eur": float(report.total_net_eur),
        "rho_eur": (math.nan if report.min_net_eur is None
                    else float(report.min_net_eur)),
        "phi_min_kwh": (math.nan if report.min_unserved_kwh is None
                        else report.min_unserved_kwh),
        "Phi_mwh": report.total_unserved_kwh / 1000.0,
        "avg_cent_per_kwh": (math.nan
                             if report.average_unit_cost_cent_per_kwh is None
                             else report.average_unit_cost_cent_per_kwh),
    }


def cmd_sweep(args) -> int:
    spec = _load_json_config(args.spec)
    instance_path = _pick(args.instance, spec, "instance", None)
    if instance_path is None:
        raise CliError("sweep spec needs an instance path")
    out_dir = _pick(args.out, spec, "out", None)
    if out_dir is None:
        raise CliError("sweep needs an output directory")
    gap = float(_pick(args.gap, spec, "gap_eur", 0.01))
    caps = _sweep_caps(spec)

    try:
        instance = load_instance(instance_path)
    except OSError as exc:
        raise CliError(f"cannot read instance {instance_path}: {exc}") from exc
    except InstanceFormatError as exc:
        raise CliError(f"instance {instance_path}: {exc}") from exc
    report = validate(instance)
    if not report.ok:
        raise CliError(f"instance {instance_path} invalid:\n{report}")

    config = BnbConfig(gap_eur=gap)
    rows = []
    for power_cap, energy_cap in caps:
        try:
            row = sweep_row(instance, power_cap, energy_cap, config)
        except (SolverError, SettlementError) as exc:
            log.error("caps (%s, %s) failed: %s", power_cap, energy_cap, exc)
            row = {c: math.nan for c in SWEEP_COLUMNS}
            row["power_cap"] = power_cap
            row["energy_cap"] = energy_cap
        rows.append(row)
        log.info("caps (%s kW, %s kWh): P=%s U=%s", power_cap, energy_cap,
                 row["P_eur"], row["U_eur"])

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(row[k])) for k in SWEEP_COLUMNS})
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

def _histogram_csv(values: np.ndarray, bins: int, path) -> None:
    counts, edges = np.histogram(values, bins=bins)
    n = counts.sum()
    widths = np.diff(edges)
    pdf = counts / (n * widths)
    cdf = np.cumsum(counts) / n
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("bin_left,bin_right,pdf,cdf\n")
        for k in range(bins):
            fh.write(f"{edges[k]!r},{edges[k + 1]!r},{pdf[k]!r},{cdf[k]!r}\n")


def cmd_report(args) -> int:
    if args.bins < 1:
        raise CliError(f"bins must be >= 1, got {args.bins}")
    settlement_path = Path(args.in_dir) / "settlement.csv"
    try:
        with open(settlement_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
    except OSError as exc:
        raise CliError(f"cannot read {settlement_path}: {exc}") from exc
    if not rows:
        raise CliError(f"{settlement_path} holds no sessions")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for filename, column in REPORT_SOURCES:
        try:
            values = np.array([float(r[column]) for r in rows])
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(
                f"{settlement_path} missing or malformed column {column}: {exc!r}"
            ) from exc
        _histogram_csv(values, args.bins, out / filename)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cpoflex",
        description="Day-ahead charging scheduler with shortfall compensation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="fit records and emit a synthetic instance")
    g.add_argument("--records", required=True, help="historical records CSV")
    g.add_argument("--policy", help="policy config JSON")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="instance JSON path")
    g.add_argument("--count", type=int, help="number of sessions")
    g.add_argument("--power-cap-kw", type=float, dest="power_cap_kw")
    g.add_argument("--energy-cap-kwh", type=float, dest="energy_cap_kwh")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("solve", help="solve one instance and settle it")
    s.add_argument("--instance", required=True)
    s.add_argument("--gap", type=float, help="absolute bound gap in EUR")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--config", help="solver config JSON")
    s.add_argument("--node-limit", type=int, dest="node_limit")
    s.add_argument("--time-limit-s", type=float, dest="time_limit_s")
    s.set_defaults(func=cmd_solve)

    w = sub.add_parser("sweep", help="re-solve over a ladder of capacity pairs")
    w.add_argument("--spec", required=True, help="sweep spec JSON")
    w.add_argument("--out", help="output directory (overrides spec)")
    w.add_argument("--instance", help="instance JSON (overrides spec)")
    w.add_argument("--gap", type=float, help="absolute bound gap in EUR")
    w.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="distribution tables from a solve directory")
    r.add_argument("--in", dest="in_dir", required=True, help="solve output directory")
    r.add_argument("--bins", type=int, default=40)
    r.add_argument("--out", required=True, help="report output directory")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FitRefusalError as exc:
        print(f"fit refused: {exc}", file=sys.stderr)
        return EXIT_FIT_REFUSED
    except (SolverError, SettlementError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))
