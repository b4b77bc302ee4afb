"""Shared builders and independent oracles for the test suite.

The oracles here deliberately avoid the library's own algorithms: the LP
oracle enumerates vertices outright, the compensation oracle prices segment
chords in closed form, and settlement cross-checks recompute everything from
raw schedule arrays.
"""

import itertools
import math
from datetime import datetime

import numpy as np

from cpoflex.datagen import random_utility
from cpoflex.model import Instance, SessionSpec, TimeGrid, min_price, validate
from cpoflex.utility import UtilityCurve

GRID_START = datetime(2024, 1, 8)


def single_segment_curve(energy: float, final: float) -> UtilityCurve:
    return UtilityCurve(breakpoints=(0.0, energy), upper_values=(0.0,),
                        lower_values=(final,))


def two_segment_curve() -> UtilityCurve:
    # the right-closed breakpoint convention makes evaluate(5) the lower 1
    return UtilityCurve(breakpoints=(0.0, 5.0, 10.0), upper_values=(0.0, 2.0),
                        lower_values=(1.0, 4.0))


def toy_session(sid="s0", arrival=0, departure=3, energy=6.0, gamma=0.5,
                power=6.0, eta=1.0, price=0.30, curve=None) -> SessionSpec:
    if curve is None:
        cap = (price if isinstance(price, float) else min(price)) * gamma * energy
        curve = single_segment_curve(energy, cap)
    return SessionSpec(id=sid, arrival_slot=arrival, departure_slot=departure,
                       required_energy_kwh=energy, gamma=gamma,
                       max_power_kw=power, efficiency=eta,
                       price_eur_per_kwh=price, utility=curve)


def jump_instance() -> Instance:
    """Single session whose curve jumps at 4 kWh; caps limit service to 2 kWh.

    The relaxation mixes the two segments at the optimal shortfall of 6 kWh,
    so the root relaxation comes back fractional and the search must branch.
    """
    curve = UtilityCurve(breakpoints=(0.0, 4.0, 8.0), upper_values=(0.0, 2.0),
                         lower_values=(0.1, 2.4))
    s = SessionSpec(id="j0", arrival_slot=0, departure_slot=0,
                    required_energy_kwh=8.0, gamma=1.0, max_power_kw=10.0,
                    efficiency=1.0, price_eur_per_kwh=0.30, utility=curve)
    grid = TimeGrid(delta_t_hours=1.0, num_slots=1, start=GRID_START)
    return Instance(grid=grid, sessions=(s,), power_cap_kw=2.0,
                    energy_cap_kwh=100.0)


def random_instance(seed: int, n_max=4, t_max=6, kappa_max=2,
                    generous=False) -> Instance:
    """Small random instance that always passes validate().

    ``generous`` widens windows and caps so the profit optimum serves every
    session in full.
    """
    rng = np.random.default_rng(seed)
    t = int(rng.integers(3, t_max + 1))
    n = int(rng.integers(1, n_max + 1))
    delta = float(rng.choice([0.25, 0.5, 1.0]))
    grid = TimeGrid(delta_t_hours=delta, num_slots=t, start=GRID_START)
    sessions = []
    for i in range(n):
        if generous:
            a, d = 0, t - 1
        else:
            a = int(rng.integers(0, t))
            d = int(rng.integers(a, t))
        kappa = int(rng.integers(1, kappa_max + 1))
        gamma = float(rng.uniform(0.3, 1.0))
        eta = float(rng.uniform(0.85, 1.0))
        power = float(rng.uniform(3.0, 12.0))
        if generous:
            energy = float(rng.uniform(0.3, 0.9) * eta * power * delta * t)
        else:
            energy = float(rng.uniform(2.0, 14.0))
        if rng.random() < 0.3:
            price = tuple(float(p) for p in rng.uniform(0.05, 0.5, t))
        else:
            price = float(rng.uniform(0.05, 0.5))
        c_min = price if isinstance(price, float) else min(price)
        curve = random_utility(rng, kappa, energy, c_min * gamma * energy)
        sessions.append(SessionSpec(
            id=f"s{i}", arrival_slot=a, departure_slot=d,
            required_energy_kwh=energy, gamma=gamma, max_power_kw=power,
            efficiency=eta, price_eur_per_kwh=price, utility=curve))
    if generous:
        power_cap = float(sum(s.max_power_kw for s in sessions)) + 1.0
        energy_cap = 2.0 * sum(s.required_energy_kwh / s.efficiency
                               for s in sessions)
    else:
        power_cap = float(rng.uniform(4.0, 20.0))
        energy_cap = float(rng.uniform(2.0, 40.0))
    instance = Instance(grid=grid, sessions=tuple(sessions),
                        power_cap_kw=power_cap, energy_cap_kwh=energy_cap)
    report = validate(instance)
    assert report.ok, str(report)
    return instance


# ---------------------------------------------------------------------------
# LP oracle: exhaustive vertex enumeration for small bounded LPs

def _lp_arrays(lp):
    n, m = lp.num_cols, lp.num_rows
    a = np.zeros((m, n))
    for i in range(m):
        a[i, lp._row_cols[i]] = lp._row_vals[i]
    lb = np.asarray(lp._lower, dtype=float)
    ub = np.asarray(lp._upper, dtype=float)
    rlo = np.asarray(lp._row_lower, dtype=float)
    rup = np.asarray(lp._row_upper, dtype=float)
    obj = np.asarray(lp._objective, dtype=float)
    return a, lb, ub, rlo, rup, obj


def vertex_optimum(lp, tol=1e-8) -> float:
    """Maximum objective over all vertices of the (bounded) feasible set.

    Candidate vertices: pick k rows to hold at one of their finite bounds,
    pick k columns to solve for, pin the rest at a column bound.  Bounded
    columns guarantee the optimum sits on such a vertex.  Returns -inf when
    no candidate is feasible.
    """
    a, lb, ub, rlo, rup, obj = _lp_arrays(lp)
    m, n = a.shape
    best = -math.inf

    def feasible(x):
        if np.any(x < lb - tol * (1.0 + np.abs(lb))):
            return False
        if np.any(x > ub + tol * (1.0 + np.abs(ub))):
            return False
        ax = a @ x
        scale = 1.0 + np.abs(ax)
        lo_ok = np.isinf(rlo) | (ax >= rlo - tol * scale)
        up_ok = np.isinf(rup) | (ax <= rup + tol * scale)
        return bool(np.all(lo_ok & up_ok))

    for k in range(0, min(m, n) + 1):
        for rows in itertools.combinations(range(m), k):
            rhs_choices = []
            for i in rows:
                cands = []
                if math.isfinite(rlo[i]):
                    cands.append(rlo[i])
                if math.isfinite(rup[i]) and rup[i] != rlo[i]:
                    cands.append(rup[i])
                if not cands:
                    break
                rhs_choices.append(cands)
            else:
                for rhs in itertools.product(*rhs_choices):
                    for free in itertools.combinations(range(n), k):
                        fixed = [j for j in range(n) if j not in free]
                        for mask in itertools.product((0, 1), repeat=len(fixed)):
                            x = np.zeros(n)
                            for j, side in zip(fixed, mask):
                                x[j] = lb[j] if side == 0 else ub[j]
                            if k:
                                sub = a[np.ix_(rows, free)]
                                red = np.asarray(rhs) - a[np.ix_(rows, fixed)] @ x[fixed]
                                try:
                                    x[list(free)] = np.linalg.solve(sub, red)
                                except np.linalg.LinAlgError:
                                    continue
                            if feasible(x):
                                best = max(best, float(obj @ x))
    return best


def random_lp(seed: int, n_max=6, m_max=4):
    """Random bounded LP, feasible by construction (rows cut around a point)."""
    from cpoflex.lp import LinearProgram

    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    lp = LinearProgram(f"rand{seed}")
    lb = rng.uniform(-3.0, 0.0, n)
    ub = lb + rng.uniform(0.5, 4.0, n)
    for j in range(n):
        lp.add_column(f"x{j}", lb[j], ub[j], float(rng.normal(0.0, 1.0)))
    x0 = lb + rng.uniform(0.2, 0.8, n) * (ub - lb)
    for i in range(m):
        coeffs = rng.normal(0.0, 1.0, n)
        coeffs[rng.random(n) < 0.3] = 0.0
        mid = float(coeffs @ x0)
        if rng.random() < 0.3:
            lo, hi = mid - float(rng.uniform(0.1, 2.0)), mid + float(rng.uniform(0.1, 2.0))
        elif rng.random() < 0.5:
            lo, hi = -math.inf, mid + float(rng.uniform(0.1, 2.0))
        else:
            lo, hi = mid - float(rng.uniform(0.1, 2.0)), math.inf
        lp.add_row(f"r{i}", [(j, coeffs[j]) for j in range(n) if coeffs[j] != 0.0],
                   lo, hi)
    return lp


# ---------------------------------------------------------------------------
# compensation oracle: chord pricing per selector pattern, closed form

def pattern_min_z(curve: UtilityCurve, phi: float, tol=1e-12) -> float:
    """Cheapest compensation for ``phi`` over all selector patterns."""
    best = math.inf
    if abs(phi) <= tol:
        best = 0.0
    bp, up, lo = curve.breakpoints, curve.upper_values, curve.lower_values
    for k in range(1, curve.kappa + 1):
        a, b = bp[k - 1], bp[k]
        if a - tol <= phi <= b + tol:
            t = (min(max(phi, a), b) - a) / (b - a)
            best = min(best, up[k - 1] + t * (lo[k - 1] - up[k - 1]))
    return best


def encoding_min_z(curve: UtilityCurve, phi: float):
    """Minimum Z under the actual encoded rows, by exhaustive y enumeration.

    Builds one small LP per selector pattern (binaries pinned through bounds)
    and minimizes Z with phi fixed; returns the best over feasible patterns.
    """
    from cpoflex import lp as lpmod
    from cpoflex.utility import encode

    enc = encode(curve)
    kappa = curve.kappa
    best = math.inf
    for seg in [None] + list(range(1, kappa + 1)):
        prog = lpmod.LinearProgram("enc")
        lam_lo = [prog.add_column(f"ll{k}", 0.0, 1.0) for k in range(kappa + 1)]
        lam_up = [prog.add_column(f"lu{k}", 0.0, 1.0) for k in range(kappa)]
        y = []
        for k in range(1, kappa + 1):
            v = 1.0 if seg == k else 0.0
            y.append(prog.add_column(f"y{k}", v, v))
        phi_col = prog.add_column("phi", phi, phi)
        z_col = prog.add_column("z", 0.0, curve.max_compensation, -1.0)
        for name, coeffs, lo, hi in enc.rows(lam_lo, lam_up, y, phi_col, z_col):
            prog.add_row(name, coeffs, lo, hi)
        sol = lpmod.solve_lp(prog)
        if sol.status == lpmod.OPTIMAL:
            best = min(best, -sol.objective)
    return best
