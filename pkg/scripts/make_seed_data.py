#!/usr/bin/env python3
"""Build the shipped seed data: corpus, instance, and sweep ladder.

The corpus is drawn from a documented ground-truth dependence model (t
copula, correlation R_TRUE, NU_TRUE degrees of freedom) pushed through
parametric marginals, so fit-then-sample round trips have a known answer.
The instance is generated from a fit on that corpus with a uniform tariff,
and every session's compensation curve is rebuilt from the convex ramped
family below (token rates in the tolerated zone, then a climb to nearly the
adequacy cap).  Its operator caps are the base ladder row scaled so the
ratio of capacity to the instance's acceptable-energy total matches the
design point BASE_ACCEPTABLE_KWH : (BASE_POWER_KW, BASE_ENERGY_KWH).

The script verifies, by solving, that the base-row caps serve every session
in full and that the minimum session net flips sign across the two ladder
rows bracketing the acceptable-energy total, then writes the capacity ladder
as a sweep spec.  Reruns reproduce the shipped files byte for byte.  Pass
--ladder to also solve all ladder rows and print the trend table (slow).
"""

import argparse
import json
import math
import sys
import time
from dataclasses import replace
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from cpoflex.datagen import (GenPolicy, fit_copula, generate_sessions,
                             load_records, save_records, stream,
                             student_t_cdf)
from cpoflex.model import Instance, acceptable_energy, default_grid, \
    min_price, settle, save_instance, validate
from cpoflex.solver import BnbConfig, build_model, solve, verify_solution
from cpoflex.utility import UtilityCurve

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data"

CORPUS_SEED = 20240105
CORPUS_SIZE = 1760
R_TRUE = np.array([
    [1.00, 0.35, 0.15],
    [0.35, 1.00, 0.55],
    [0.15, 0.55, 1.00],
])
NU_TRUE = 6
# marginals: arrival hour, connection hours, battery energy demand (kWh);
# arrival + duration never passes the end of the day grid, and dwells are
# long enough that load can spread away from the midday occupancy peak
ARRIVAL = dict(mean=8.7, sd=1.9, lo=5.0, hi=12.0)
DURATION = dict(mean=9.2, sd=1.8, lo=5.0, hi=12.0)
ENERGY = dict(log_mean=math.log(17.0), log_sd=0.45, lo=4.0, hi=40.0)
CORPUS_BASE_DAY = datetime(2023, 1, 2)
RECORDS_PER_DAY = 8

INSTANCE_SEED_CANDIDATES = range(64)
INSTANCE_SIZE = 400
GRID_START = datetime(2024, 1, 8)
ENERGY_MARGIN = 1.003   # base energy cap must clear full service by this factor

# Shipped-instance curve family.  Every curve is convex: piecewise slopes
# ascend from token rates inside the tolerated zone [0, (1-gamma)E] (at most
# TOLERATED_SLOPE) to one ramp past the acceptable point that reaches
# FINAL_LO..FINAL_HI of the adequacy cap at full shortfall.  A convex curve
# coincides with the lower envelope its mixed-integer encoding relaxes to,
# so every ladder row prices compensation exactly at the root relaxation and
# closes there, instead of branching across near-tied amortizations of value
# jumps.  Economics of the family: serving a session below its acceptable
# point saves compensation at ~0.27 EUR per grid kWh on top of the 0.30
# billed, while tolerated-zone service saves almost nothing, so the profit
# optimum serves everyone to at least their acceptable energy while the day
# budget covers the acceptable total.  One designated buffer session ramps at
# the strictly cheapest rate BUFFER_TAIL_RATE; the first kWh of unavoidable
# beyond-acceptable shortfall all land on it, and its compensation outruns
# its shrinking bill once the shortfall passes roughly half its
# beyond-acceptable range.  The buffer is sized so the first ladder row below
# the acceptable total pushes it past that break-even, which flips the
# minimum session net negative exactly as the budget crosses the total.
TOLERATED_SLOPE = 0.005   # EUR/kWh ceiling inside the tolerated zone
FINAL_LO = 0.995          # full-shortfall value as a fraction of the cap
FINAL_HI = 0.9995
BUFFER_TAIL_RATE = 0.28   # EUR/kWh past the buffer's acceptable point
BUFFER_SIZE_FACTOR = 1.3  # buffer capacity target over the bracket deficit
MIN_SPACING_FRACTION = 1e-3


def ramped_utility(rng, required_kwh: float, gamma: float, rate: float,
                   tail_rate: float | None = None) -> UtilityCurve:
    """Convex four-segment curve anchored at the acceptable shortfall.

    Three ascending token-slope pieces cover the tolerated zone; the last
    segment ramps to FINAL_LO..FINAL_HI of the adequacy cap, or at exactly
    ``tail_rate`` EUR/kWh when given (the buffer session).
    """
    cap = rate * gamma * required_kwh
    accept = (1.0 - gamma) * required_kwh
    spacing = required_kwh * MIN_SPACING_FRACTION
    assert accept >= 4.0 * spacing, "tolerated zone too narrow; cap gamma lower"
    for _ in range(100):
        mids = np.sort(rng.uniform(0.0, accept, 2))
        if np.diff([0.0, *mids, accept]).min() >= spacing:
            break
    else:
        mids = accept * np.array([1.0 / 3.0, 2.0 / 3.0])
    zone_slopes = np.sort(rng.uniform(0.2, 1.0, 3)) * TOLERATED_SLOPE
    heights = np.cumsum(zone_slopes * np.diff([0.0, *mids, accept]))
    if tail_rate is None:
        final = rng.uniform(FINAL_LO, FINAL_HI) * cap
    else:
        final = heights[2] + tail_rate * (required_kwh - accept)
    # slopes must keep ascending through the ramp, and the cap must hold
    assert final - heights[2] >= zone_slopes[2] * (required_kwh - accept)
    assert final <= cap + 1e-12
    return UtilityCurve(
        breakpoints=(0.0, *mids, accept, required_kwh),
        upper_values=(0.0, heights[0], heights[1], heights[2]),
        lower_values=(heights[0], heights[1], heights[2], final),
    )

# ladder of (power cap kW, energy cap kWh) at the design demand level; both
# scale with the generated instance's acceptable-energy total, so the two
# bracket rows land just above and just below that total
BASE_ACCEPTABLE_KWH = 6065.0
BASE_POWER_KW = 700.0
BASE_ENERGY_KWH = 8200.0
SQUEEZE_POWER_KW = 520.0
BRACKET_ABOVE_KWH = 6070.0
BRACKET_BELOW_KWH = 6060.0
LADDER = (
    (BASE_POWER_KW, BASE_ENERGY_KWH),
    (SQUEEZE_POWER_KW, BASE_ENERGY_KWH),
    (SQUEEZE_POWER_KW, 6200.0),
    (SQUEEZE_POWER_KW, BRACKET_ABOVE_KWH),
    (SQUEEZE_POWER_KW, BRACKET_BELOW_KWH),
    (SQUEEZE_POWER_KW, 5000.0),
    (SQUEEZE_POWER_KW, 4000.0),
    (SQUEEZE_POWER_KW, 3000.0),
    (SQUEEZE_POWER_KW, 2950.0),
)


def make_corpus() -> Path:
    normals = stream(CORPUS_SEED, "corpus", "normals").standard_normal(
        (CORPUS_SIZE, 3))
    chi2 = stream(CORPUS_SEED, "corpus", "chisq").chisquare(NU_TRUE, CORPUS_SIZE)
    chol = np.linalg.cholesky(R_TRUE)
    t = (normals @ chol.T) / np.sqrt(chi2 / NU_TRUE)[:, None]
    u = student_t_cdf(t, NU_TRUE)

    arrival_h = np.clip(ARRIVAL["mean"] + ARRIVAL["sd"] * ndtri(u[:, 0]),
                        ARRIVAL["lo"], ARRIVAL["hi"])
    duration_h = np.clip(DURATION["mean"] + DURATION["sd"] * ndtri(u[:, 1]),
                         DURATION["lo"], DURATION["hi"])
    energy = np.clip(np.exp(ENERGY["log_mean"] + ENERGY["log_sd"] * ndtri(u[:, 2])),
                     ENERGY["lo"], ENERGY["hi"])

    records = []
    for i in range(CORPUS_SIZE):
        arrival_dt = (CORPUS_BASE_DAY + timedelta(days=i // RECORDS_PER_DAY)
                      + timedelta(hours=float(arrival_h[i])))
        departure_dt = arrival_dt + timedelta(hours=float(duration_h[i]))
        records.append((arrival_dt, departure_dt, float(energy[i])))

    DATA.mkdir(parents=True, exist_ok=True)
    path = DATA / "seed_corpus.csv"
    save_records(path, records)
    print(f"corpus: {CORPUS_SIZE} records -> {path}")
    return path


def solve_caps(instance: Instance, power_kw: float, energy_kwh: float):
    inst = instance.with_caps(power_cap_kw=power_kw, energy_cap_kwh=energy_kwh)
    t0 = time.monotonic()
    result = solve(build_model(inst), BnbConfig(gap_eur=0.01))
    elapsed = time.monotonic() - t0
    residuals = verify_solution(inst, result)
    assert residuals.ok(), f"verification failed: {residuals.worst}"
    report = settle(inst, result.schedule, result.phi, result.z)
    return result, report, elapsed


def make_instance(corpus_path: Path) -> tuple[Instance, float]:
    data = load_records(corpus_path)
    model, fit = fit_copula(data)
    print(f"fit: nu={fit.nu} tau01={fit.tau[0, 1]:+.3f} "
          f"tau02={fit.tau[0, 2]:+.3f} tau12={fit.tau[1, 2]:+.3f}")

    grid = default_grid(GRID_START)
    # one tariff for everyone: with a premium-rate group, billing spare
    # capacity to premium sessions can profitably displace service away from
    # sessions whose compensation curves start flat, and the base case then
    # leaves energy unserved no matter the draw; a single rate makes full
    # service strictly optimal whenever capacity admits it.  The generated
    # curves are then replaced with the ramped family above: unanchored
    # random curves let the optimizer starve cheap-curve sessions far below
    # their acceptable energy while capacity still covers everyone, pushing
    # session nets negative long before the capacity actually runs short.
    # The insisted-on fraction stays below 0.98 so every session joins the
    # program and every tolerated zone is wide enough to hold the ramped
    # family's interior kinks at their minimum spacing.
    policy = GenPolicy(non_participating_rate_eur_per_kwh=0.30,
                       gamma_high=0.98)

    # first seed whose draw leaves the base energy cap clear of full-service
    # demand (the realized gamma mix decides this) and whose base caps truly
    # serve everyone, confirmed by solving
    for seed in INSTANCE_SEED_CANDIDATES:
        sessions, gen = generate_sessions(model, INSTANCE_SIZE, seed, grid,
                                          policy)
        assert gen.snap_failures == 0, gen
        required_grid = sum(s.required_energy_kwh / s.efficiency
                            for s in sessions)
        acceptable_grid = sum(acceptable_energy(s) / s.efficiency
                              for s in sessions)
        scale = acceptable_grid / BASE_ACCEPTABLE_KWH
        power_cap = BASE_POWER_KW * scale
        energy_cap = BASE_ENERGY_KWH * scale
        if energy_cap < required_grid * ENERGY_MARGIN:
            print(f"seed {seed}: energy cap {energy_cap:.1f} too close to "
                  f"demand {required_grid:.1f}, skipping")
            continue

        # the lower bracket row withholds this much battery-side energy from
        # the acceptable total; the buffer must soak all of it up and still
        # sit strictly inside its beyond-acceptable range, with its net
        # break-even (about 0.54 of that range) already behind it
        eta = sessions[0].efficiency
        deficit = eta * acceptable_grid * (1.0 - BRACKET_BELOW_KWH
                                           / BASE_ACCEPTABLE_KWH)
        target = BUFFER_SIZE_FACTOR * deficit
        buffer_i = min(range(len(sessions)),
                       key=lambda i: abs(acceptable_energy(sessions[i])
                                         - target))
        buffer_range = acceptable_energy(sessions[buffer_i])
        if not deficit + 0.5 <= buffer_range <= 1.55 * deficit:
            print(f"seed {seed}: no buffer candidate near {target:.2f} kWh "
                  f"(closest spans {buffer_range:.2f}), skipping")
            continue
        print(f"seed {seed}: buffer {sessions[buffer_i].id} spans "
              f"{buffer_range:.2f} kWh beyond acceptable, bracket deficit "
              f"{deficit:.2f} kWh")
        sessions = [
            replace(s, utility=ramped_utility(
                stream(seed, "ramp", i), s.required_energy_kwh, s.gamma,
                min_price(s),
                tail_rate=BUFFER_TAIL_RATE if i == buffer_i else None))
            for i, s in enumerate(sessions)
        ]

        instance = Instance(grid=grid, sessions=tuple(sessions),
                            power_cap_kw=power_cap, energy_cap_kwh=energy_cap)
        report = validate(instance)
        assert report.ok, str(report)

        result, settlement, elapsed = solve_caps(instance, power_cap,
                                                 energy_cap)
        print(f"seed {seed}: base solve status={result.status} "
              f"nodes={result.nodes} lp_iters={result.lp_iterations} "
              f"time={elapsed:.1f}s")
        if settlement.total_unserved_kwh > 1e-6:
            print(f"seed {seed}: base caps leave "
                  f"{settlement.total_unserved_kwh!r} kWh unserved, skipping")
            continue

        # the minimum session net must flip sign across the two ladder rows
        # bracketing the acceptable-energy total
        _, above, _ = solve_caps(instance, SQUEEZE_POWER_KW * scale,
                                 BRACKET_ABOVE_KWH * scale)
        _, below, _ = solve_caps(instance, SQUEEZE_POWER_KW * scale,
                                 BRACKET_BELOW_KWH * scale)
        print(f"seed {seed}: min net {above.min_net_eur:+.3f} just above "
              f"the acceptable total, {below.min_net_eur:+.3f} just below")
        if not (above.min_net_eur >= 0.0 and below.min_net_eur < 0.0):
            print(f"seed {seed}: no sign flip at the acceptable total, "
                  f"skipping")
            continue

        print(f"instance: seed {seed}, sum E/eta = {required_grid:.1f} kWh, "
              f"sum e/eta = {acceptable_grid:.1f} kWh, scale = {scale:.6f}")
        print(f"base caps: {power_cap:.2f} kW, {energy_cap:.2f} kWh")
        print(f"base aggregates: Phi={settlement.total_unserved_kwh!r} kWh, "
              f"P={settlement.total_net_eur}, "
              f"U={settlement.total_compensation_eur}, "
              f"avg={settlement.average_unit_cost_cent_per_kwh:.4f} c/kWh")
        path = DATA / "seed_instance.json"
        save_instance(instance, path)
        print(f"instance -> {path}")
        return instance, scale

    raise SystemExit("no candidate seed produced a full-service base case")


def write_sweep_spec(scale: float) -> list[tuple[float, float]]:
    caps = [(p * scale, e * scale) for p, e in LADDER]
    spec = {
        "instance": "data/seed_instance.json",
        "gap_eur": 0.01,
        "caps": [[p, e] for p, e in caps],
    }
    path = DATA / "seed_sweep.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec, fh, indent=2)
        fh.write("\n")
    print(f"sweep spec ({len(caps)} rows) -> {path}")
    return caps


def run_ladder(instance: Instance, caps) -> None:
    acceptable_grid = sum(acceptable_energy(s) / s.efficiency
                          for s in instance.sessions)
    print(f"\nladder (acceptable-energy total {acceptable_grid:.1f} kWh):")
    print("power_kw energy_kwh    P_eur      U_eur    Phi_kwh   rho_eur  "
          "avg_c    time_s")
    total = 0.0
    for power_kw, energy_kwh in caps:
        result, rep, elapsed = solve_caps(instance, power_kw, energy_kwh)
        total += elapsed
        avg = rep.average_unit_cost_cent_per_kwh
        print(f"{power_kw:8.1f} {energy_kwh:10.1f} {float(rep.total_net_eur):9.2f} "
              f"{float(rep.total_compensation_eur):9.2f} "
              f"{rep.total_unserved_kwh:10.3f} {float(rep.min_net_eur):8.3f} "
              f"{avg if avg is not None else float('nan'):7.3f} {elapsed:8.1f}")
    print(f"ladder total solve time: {total:.1f}s")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ladder", action="store_true",
                        help="also solve every ladder row (slow)")
    args = parser.parse_args()

    corpus_path = make_corpus()
    instance, scale = make_instance(corpus_path)
    caps = write_sweep_spec(scale)
    if args.ladder:
        run_ladder(instance, caps)
    return 0


if __name__ == "__main__":
    sys.exit(main())
