"""Exact day-ahead scheduler: MILP assembly and branch-and-bound.

The model maximizes billing revenue minus shortfall compensation.  Per
session it carries one power column per connected slot, the served-energy and
shortfall bookkeeping columns, and the curve encoding's multipliers and
selector binaries; globally one aggregate-power column per slot plus the day
energy cap.  Branching touches only the selector binaries: setting one to 1
also drops its siblings to 0 (at most one segment may be selected), so a
session is decided in one dive rather than two to the kappa.  Node relaxations
reuse the parent basis, search is best-bound with an optional depth-first
plunge while no incumbent exists, and the incumbent pool is seeded by a greedy
pour plus an iterated fix-selectors-and-resolve polish of the root relaxation.
"""

from __future__ import annotations

import bisect
import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import lp as lpmod
from .lp import BasisToken, LinearProgram, LpSolution, solve_lp
from .model import Instance, Schedule, ValidationReport, min_price, validate
from .utility import chord, encode, evaluate, segment_of


class InvalidInstanceError(ValueError):
    """Instance failed validation; carries the full report."""

    def __init__(self, report: ValidationReport):
        super().__init__(str(report))
        self.report = report


class BruteForceBudgetError(ValueError):
    """Segment-pattern enumeration would exceed the configured budget."""


class SolverError(RuntimeError):
    """Internal contract violation (e.g. relaxation infeasible on valid input)."""


OPTIMAL = "optimal"
GAP_REACHED = "gap-reached"
LIMIT = "limit"

# Optimal shortfalls sit exactly on curve breakpoints (the cheap side of a
# value jump); recomputing phi from served energy lands O(1e-14) above the
# breakpoint and would re-price the whole jump.  Snap down within this band:
# far above float noise, far below both the 1e-6 residual tolerances and the
# narrowest meaningful segment.
PHI_SNAP_KWH = 1e-7

# The phi column itself drifts further at degenerate vertices (ties between
# sessions leave the relaxation free to park phi a hair past a breakpoint).
# Pattern selection for the incumbent polish snaps within this wider band; it
# only picks which segment to fix, pricing always happens on the true curve.
PATTERN_SNAP_KWH = 1e-4

MOST_FRACTIONAL = "most-fractional"
BRANCHING_RULES = (MOST_FRACTIONAL,)


@dataclass(frozen=True)
class BnbConfig:
    """Branch-and-bound controls; defaults are the production settings.

    ``branching`` names the rule for picking the branch column; the only
    implemented rule is ``most-fractional`` (ties resolved to the lowest
    session id, then the lowest segment).
    """

    gap_eur: float = 0.01
    integrality_tol: float = 1e-6
    node_limit: int = 1_000_000
    time_limit_s: float | None = None
    branching: str = MOST_FRACTIONAL
    lp_max_iters: int | None = None
    seed_incumbent: bool = True   # greedy pour + root polish before the search


@dataclass
class MilpModel:
    instance: Instance
    lp: LinearProgram
    x_cols: list[dict[int, int]]
    h_col: list[int]
    phi_col: list[int]
    z_col: list[int]
    lam_lo: list[list[int]]
    lam_up: list[list[int]]
    y_cols: list[list[int]]
    p_cols: list[int]
    binaries: list[tuple[int, int, int]]   # (column, session index, segment)
    registry: dict[str, int]


@dataclass
class SolveResult:
    schedule: Schedule
    phi: np.ndarray
    z: np.ndarray
    active_segment: list[int | None]
    objective: float
    best_bound: float
    gap: float
    nodes: int
    status: str
    wall_time_s: float
    lp_iterations: int


def build_model(instance: Instance) -> MilpModel:
    """Assemble the relaxation; rejects invalid instances with the report."""
    report = validate(instance)
    if not report.ok:
        raise InvalidInstanceError(report)

    grid = instance.grid
    delta_t = grid.delta_t_hours
    prog = LinearProgram("schedule")
    registry: dict[str, int] = {}

    def col(name, lo, hi, obj=0.0):
        idx = prog.add_column(name, lo, hi, obj)
        registry[name] = idx
        return idx

    x_cols, h_col, phi_col, z_col = [], [], [], []
    lam_lo, lam_up, y_cols = [], [], []
    binaries: list[tuple[int, int, int]] = []

    for i, s in enumerate(instance.sessions):
        price = s.price_array(grid.num_slots)
        xmap: dict[int, int] = {}
        for t in s.window_slots:
            xmap[t] = col(f"x[{s.id},{t}]", 0.0, s.max_power_kw, delta_t * price[t])
        x_cols.append(xmap)
        window_energy = s.max_power_kw * len(xmap) * delta_t
        h_col.append(col(f"H[{s.id}]", 0.0, window_energy))
        phi_col.append(col(f"phi[{s.id}]", 0.0, s.required_energy_kwh))
        z_col.append(col(f"Z[{s.id}]", 0.0, s.utility.max_compensation, -1.0))
        enc = encode(s.utility)
        lam_lo.append([col(f"lambda_lo[{s.id},{k}]", 0.0, 1.0)
                       for k in range(enc.kappa + 1)])
        lam_up.append([col(f"lambda_up[{s.id},{k}]", 0.0, 1.0)
                       for k in range(enc.kappa)])
        ys = []
        for k in range(1, enc.kappa + 1):
            c = col(f"y[{s.id},{k}]", 0.0, 1.0)
            ys.append(c)
            binaries.append((c, i, k))
        y_cols.append(ys)

    p_cols = [col(f"p[{t}]", 0.0, instance.power_cap_kw)
              for t in range(grid.num_slots)]

    for i, s in enumerate(instance.sessions):
        coeffs = [(c, delta_t) for c in x_cols[i].values()] + [(h_col[i], -1.0)]
        prog.add_row(f"h_def[{s.id}]", coeffs, 0.0, 0.0)
        prog.add_row(f"adequacy[{s.id}]",
                     [(phi_col[i], 1.0), (h_col[i], s.efficiency)],
                     s.required_energy_kwh, math.inf)
        enc = encode(s.utility)
        for name, coeffs, lo, hi in enc.rows(lam_lo[i], lam_up[i], y_cols[i],
                                             phi_col[i], z_col[i]):
            prog.add_row(f"{name}[{s.id}]", coeffs, lo, hi)

    for t in range(grid.num_slots):
        coeffs = [(x_cols[i][t], 1.0)
                  for i in range(instance.num_sessions) if t in x_cols[i]]
        coeffs.append((p_cols[t], -1.0))
        prog.add_row(f"p_def[{t}]", coeffs, 0.0, 0.0)

    prog.add_row("energy_cap", [(c, delta_t) for c in p_cols],
                 -math.inf, instance.energy_cap_kwh)

    return MilpModel(
        instance=instance, lp=prog,
        x_cols=x_cols, h_col=h_col, phi_col=phi_col, z_col=z_col,
        lam_lo=lam_lo, lam_up=lam_up, y_cols=y_cols, p_cols=p_cols,
        binaries=binaries, registry=registry,
    )


def _snap_down(breakpoints, p: float, band: float) -> float:
    """Pull ``p`` back onto the nearest breakpoint at or below it, if close."""
    j = bisect.bisect_right(breakpoints, p) - 1
    if j >= 0 and 0.0 < p - breakpoints[j] <= band:
        return breakpoints[j]
    return p


def _price_shortfall(session, served_grid_kwh: float) -> tuple[float, float]:
    """Shortfall implied by served energy and its curve value, jump-safe."""
    p = max(0.0, session.required_energy_kwh - session.efficiency * served_grid_kwh)
    p = min(p, session.required_energy_kwh)
    p = _snap_down(session.utility.breakpoints, p, PHI_SNAP_KWH)
    return p, evaluate(session.utility, p)


def _pattern_segment(session, phi_value: float) -> int | None:
    """Segment to fix for a polish pattern, tolerant of vertex drift on phi."""
    p = min(max(phi_value, 0.0), session.required_energy_kwh)
    p = _snap_down(session.utility.breakpoints, p, PATTERN_SNAP_KWH)
    return segment_of(session.utility, p)


def greedy_incumbent(instance: Instance) -> tuple[Schedule, np.ndarray, np.ndarray]:
    """Always-feasible warm start: richest tariffs first, earliest slots first."""
    grid = instance.grid
    delta_t = grid.delta_t_hours
    n = instance.num_sessions
    kw = np.zeros((n, grid.num_slots))
    slot_load = np.zeros(grid.num_slots)
    energy_left = instance.energy_cap_kwh

    order = sorted(range(n),
                   key=lambda i: (-min_price(instance.sessions[i]), i))
    for i in order:
        s = instance.sessions[i]
        need = s.required_energy_kwh / s.efficiency   # grid-side kWh
        for t in s.window_slots:
            if need <= 1e-12 or energy_left <= 1e-12:
                break
            kwh = min(s.max_power_kw * delta_t,
                      max(0.0, (instance.power_cap_kw - slot_load[t]) * delta_t),
                      energy_left, need)
            if kwh <= 0.0:
                continue
            kw[i, t] += kwh / delta_t
            slot_load[t] += kwh / delta_t
            energy_left -= kwh
            need -= kwh

    schedule = Schedule(kw)
    served = schedule.served_grid_kwh(grid)
    phi = np.zeros(n)
    z = np.zeros(n)
    for i, s in enumerate(instance.sessions):
        phi[i], z[i] = _price_shortfall(s, float(served[i]))
    return schedule, phi, z


def _objective_of(instance: Instance, schedule: Schedule, z) -> float:
    delta_t = instance.grid.delta_t_hours
    revenue = 0.0
    for i, s in enumerate(instance.sessions):
        revenue += float(np.dot(schedule.kw[i], s.price_array(instance.grid.num_slots)))
    return revenue * delta_t - float(np.sum(z))


@dataclass
class _Incumbent:
    objective: float
    schedule: Schedule
    phi: np.ndarray
    z: np.ndarray
    segments: list[int | None]


def _extract(model: MilpModel, x: np.ndarray) -> _Incumbent:
    """Turn an LP point with integral selectors into a clean solution.

    Served energy is read off the power columns; the shortfall is then forced
    onto its schedule identity and re-priced on the curve, which can only
    lower the compensation the relaxation carried.
    """
    instance = model.instance
    grid = instance.grid
    n = instance.num_sessions
    kw = np.zeros((n, grid.num_slots))
    for i in range(n):
        for t, c in model.x_cols[i].items():
            v = x[c]
            if v > 0.0:
                kw[i, t] = min(v, instance.sessions[i].max_power_kw)
    # squeeze out tolerance-level cap exceedance the relaxation may carry
    slot_load = kw.sum(axis=0)
    over = slot_load > instance.power_cap_kw
    if np.any(over):
        kw[:, over] *= instance.power_cap_kw / slot_load[over]
    total = float(kw.sum() * grid.delta_t_hours)
    if total > instance.energy_cap_kwh and total > 0.0:
        kw *= instance.energy_cap_kwh / total
    schedule = Schedule(kw)
    served = schedule.served_grid_kwh(grid)
    phi = np.zeros(n)
    z = np.zeros(n)
    segments: list[int | None] = []
    for i, s in enumerate(instance.sessions):
        p, z[i] = _price_shortfall(s, float(served[i]))
        phi[i] = p
        segments.append(segment_of(s.utility, p))
    return _Incumbent(
        objective=_objective_of(instance, schedule, z),
        schedule=schedule, phi=phi, z=z, segments=segments,
    )


def _segment_fixes(model: MilpModel, session: int, segment: int | None):
    """Bounds fixing one session's selector pattern (None = zero shortfall)."""
    out = {}
    for k, c in enumerate(model.y_cols[session], start=1):
        if segment is not None and k == segment:
            out[c] = (1.0, 1.0)
        else:
            out[c] = (0.0, 0.0)
    return out


def solve(model: MilpModel, config: BnbConfig | None = None) -> SolveResult:
    """Branch-and-bound on the selector binaries to the configured gap."""
    config = config or BnbConfig()
    if config.branching not in BRANCHING_RULES:
        raise ValueError(
            f"unknown branching rule {config.branching!r}; "
            f"expected one of {BRANCHING_RULES}"
        )
    instance = model.instance
    t0 = time.monotonic()
    lp_iters = 0
    int_tol = config.integrality_tol

    incumbent: _Incumbent | None = None
    if config.seed_incumbent:
        schedule, phi, z = greedy_incumbent(instance)
        segments = [segment_of(s.utility, float(phi[i]))
                    for i, s in enumerate(instance.sessions)]
        incumbent = _Incumbent(_objective_of(instance, schedule, z),
                               schedule, phi, np.asarray(z, dtype=float), segments)

    prog = model.lp
    root = solve_lp(prog, max_iters=config.lp_max_iters)
    lp_iters += root.iterations
    nodes = 1
    if root.status == lpmod.INFEASIBLE:
        raise SolverError("relaxation infeasible on a validated instance")
    if root.status == lpmod.ITERATION_LIMIT:
        return _finish(model, incumbent, root.objective, nodes, LIMIT, t0, lp_iters)

    if config.seed_incumbent:
        phi_guess = [float(root.x[c]) for c in model.phi_col]
        token = root.basis
        last_pattern: list[int | None] | None = None
        for _ in range(5):
            pattern = [_pattern_segment(s, phi_guess[i])
                       for i, s in enumerate(instance.sessions)]
            if pattern == last_pattern:
                break
            last_pattern = pattern
            fixes = {}
            for i, seg in enumerate(pattern):
                fixes.update(_segment_fixes(model, i, seg))
            polish = solve_lp(prog, max_iters=config.lp_max_iters,
                              warm=token, bounds_override=fixes)
            lp_iters += polish.iterations
            if polish.status != lpmod.OPTIMAL:
                break
            token = polish.basis
            cand = _extract(model, polish.x)
            if incumbent is None or cand.objective > incumbent.objective:
                incumbent = cand
            phi_guess = [float(cand.phi[i]) for i in range(instance.num_sessions)]

    # open nodes: (-parent bound, push sequence, fixes, parent basis)
    heap: list[tuple[float, int, dict, BasisToken]] = []
    dive: list[tuple[float, int, dict, BasisToken]] = []
    seq = itertools.count()
    prune_eps = 1e-9

    def push(bound, fixes, token):
        entry = (-bound, next(seq), fixes, token)
        if incumbent is None:
            dive.append(entry)
        else:
            heapq.heappush(heap, entry)

    def best_open_bound():
        best = -math.inf
        if heap:
            best = -heap[0][0]
        for entry in dive:
            best = max(best, -entry[0])
        return best

    current: tuple[dict, BasisToken, float] | None = ({}, root.basis, root.objective)
    root_pending = True
    status = OPTIMAL

    while True:
        if current is None:
            while dive and incumbent is not None:
                heapq.heappush(heap, dive.pop())
            source = dive if (incumbent is None and dive) else heap
            if not source:
                break
            inc_obj = incumbent.objective if incumbent else -math.inf
            bound_now = max(best_open_bound(), inc_obj)
            if incumbent is not None and bound_now - inc_obj <= max(config.gap_eur, 0.0):
                status = OPTIMAL if bound_now - inc_obj <= prune_eps else GAP_REACHED
                break
            if source is dive:
                neg_bound, _, fixes, token = source.pop()
            else:
                neg_bound, _, fixes, token = heapq.heappop(source)
            if incumbent is not None and -neg_bound <= inc_obj + prune_eps:
                continue
            sol = solve_lp(prog, max_iters=config.lp_max_iters,
                           warm=token, bounds_override=fixes)
            nodes += 1
            lp_iters += sol.iterations
        else:
            fixes, token, _ = current
            if root_pending:
                sol = root
                root_pending = False
            else:
                sol = solve_lp(prog, max_iters=config.lp_max_iters,
                               warm=token, bounds_override=fixes)
                nodes += 1
                lp_iters += sol.iterations
            current = None

        if nodes > config.node_limit:
            status = LIMIT
            break
        if config.time_limit_s is not None and time.monotonic() - t0 > config.time_limit_s:
            status = LIMIT
            break
        if sol.status == lpmod.INFEASIBLE:
            continue
        if sol.status == lpmod.ITERATION_LIMIT:
            status = LIMIT
            break
        inc_obj = incumbent.objective if incumbent else -math.inf
        if sol.objective <= inc_obj + prune_eps:
            continue

        # most fractional selector; ties fall to the lowest (session, segment)
        best_frac = int_tol
        branch_col = -1
        branch_sess = -1
        branch_seg = -1
        for c, i, k in model.binaries:
            if c in fixes:
                continue
            v = sol.x[c]
            f = min(v, 1.0 - v)
            if f > best_frac:
                best_frac = f
                branch_col, branch_sess, branch_seg = c, i, k

        if branch_col < 0:
            cand = _extract(model, sol.x)
            if incumbent is None or cand.objective > incumbent.objective:
                incumbent = cand
            continue

        one_fixes = dict(fixes)
        one_fixes.update(_segment_fixes(model, branch_sess, branch_seg))
        zero_fixes = dict(fixes)
        zero_fixes[branch_col] = (0.0, 0.0)
        push(sol.objective, zero_fixes, sol.basis)
        if incumbent is None:
            # plunge: follow the selected-segment child depth first
            current = (one_fixes, sol.basis, sol.objective)
        else:
            push(sol.objective, one_fixes, sol.basis)

    if incumbent is None:
        raise SolverError("search ended without any feasible point")
    inc_obj = incumbent.objective
    if status == OPTIMAL and not heap and not dive and current is None:
        bound = inc_obj
    else:
        bound = max(best_open_bound(), inc_obj)
        if current is not None:
            bound = max(bound, current[2])
    return _finish(model, incumbent, bound, nodes, status, t0, lp_iters)


def _finish(model, incumbent, bound, nodes, status, t0, lp_iters) -> SolveResult:
    if incumbent is None:
        raise SolverError("no feasible point available")
    gap = max(0.0, bound - incumbent.objective)
    return SolveResult(
        schedule=incumbent.schedule,
        phi=incumbent.phi,
        z=incumbent.z,
        active_segment=incumbent.segments,
        objective=incumbent.objective,
        best_bound=max(bound, incumbent.objective),
        gap=gap,
        nodes=nodes,
        status=status,
        wall_time_s=time.monotonic() - t0,
        lp_iterations=lp_iters,
    )


def brute_force(instance: Instance, budget: int = 20_000,
                lp_max_iters: int | None = None) -> SolveResult:
    """Exact reference: enumerate every selector pattern, solve each LP.

    The pattern space is the product over sessions of (no shortfall, segment
    1..kappa); anything larger than ``budget`` is refused so the oracle stays
    an oracle.
    """
    model = build_model(instance)
    t0 = time.monotonic()
    count = 1
    for s in instance.sessions:
        count *= s.utility.kappa + 1
        if count > budget:
            raise BruteForceBudgetError(
                f"pattern space {count}+ exceeds budget {budget}"
            )

    choices = [[None] + list(range(1, s.utility.kappa + 1))
               for s in instance.sessions]
    best_obj = -math.inf
    best_x: np.ndarray | None = None
    token: BasisToken | None = None
    lp_iters = 0
    patterns = 0
    for pattern in itertools.product(*choices):
        fixes: dict[int, tuple[float, float]] = {}
        for i, seg in enumerate(pattern):
            fixes.update(_segment_fixes(model, i, seg))
        sol = solve_lp(model.lp, max_iters=lp_max_iters, warm=token,
                       bounds_override=fixes)
        patterns += 1
        lp_iters += sol.iterations
        if sol.status == lpmod.OPTIMAL:
            token = sol.basis
            if sol.objective > best_obj:
                best_obj = sol.objective
                best_x = sol.x.copy()

    if best_x is None:
        raise SolverError("no feasible selector pattern, which cannot happen")
    inc = _extract(model, best_x)
    return SolveResult(
        schedule=inc.schedule, phi=inc.phi, z=inc.z,
        active_segment=inc.segments,
        objective=inc.objective, best_bound=inc.objective, gap=0.0,
        nodes=patterns, status=OPTIMAL,
        wall_time_s=time.monotonic() - t0, lp_iterations=lp_iters,
    )


@dataclass(frozen=True)
class ResidualReport:
    entries: tuple[tuple[str, float], ...]

    @property
    def worst(self) -> tuple[str, float]:
        return max(self.entries, key=lambda e: e[1])

    def ok(self, tol: float = 1e-6) -> bool:
        return self.worst[1] <= tol


def verify_solution(instance: Instance, result: SolveResult) -> ResidualReport:
    """Recompute every constraint residual of a reported solution."""
    grid = instance.grid
    kw = result.schedule.kw
    entries: list[tuple[str, float]] = []

    def worst_entry(name, values):
        if values:
            label, value = max(values, key=lambda e: e[1])
            entries.append((f"{name}[{label}]", value))
        else:
            entries.append((name, 0.0))

    vals = []
    for i, s in enumerate(instance.sessions):
        outside = [t for t in range(grid.num_slots) if t not in s.window_slots]
        if outside:
            vals.append((s.id, float(np.abs(kw[i, outside]).max(initial=0.0))))
    worst_entry("window_support", vals)

    vals = [(s.id, float(np.maximum(kw[i] - s.max_power_kw, 0.0).max(initial=0.0)))
            for i, s in enumerate(instance.sessions)]
    worst_entry("power_bound", vals)

    vals = [(s.id, float(np.maximum(-kw[i], 0.0).max(initial=0.0)))
            for i, s in enumerate(instance.sessions)]
    worst_entry("power_nonneg", vals)

    served = result.schedule.served_grid_kwh(grid)
    adequacy, identity, domain, chord_resid, eval_resid = [], [], [], [], []
    for i, s in enumerate(instance.sessions):
        phi = float(result.phi[i])
        z = float(result.z[i])
        h = float(served[i])
        adequacy.append((s.id, max(0.0, s.required_energy_kwh - phi - s.efficiency * h)))
        identity.append((s.id, abs(phi - max(0.0, s.required_energy_kwh - s.efficiency * h))))
        seg = result.active_segment[i]
        bp = s.utility.breakpoints
        if seg is None:
            domain.append((s.id, abs(phi)))
            chord_resid.append((s.id, abs(z)))
        else:
            lo_dev = max(0.0, bp[seg - 1] - phi)
            hi_dev = max(0.0, phi - bp[seg])
            domain.append((s.id, max(lo_dev, hi_dev)))
            phi_c = min(max(phi, bp[seg - 1]), bp[seg])
            chord_resid.append((s.id, abs(z - chord(s.utility, seg, phi_c))))
        phi_c = min(max(phi, 0.0), s.required_energy_kwh)
        eval_resid.append((s.id, abs(z - evaluate(s.utility, phi_c))))
    worst_entry("adequacy", adequacy)
    worst_entry("shortfall_identity", identity)
    worst_entry("segment_domain", domain)
    worst_entry("compensation_chord", chord_resid)
    worst_entry("compensation_value", eval_resid)

    slot_load = kw.sum(axis=0)
    vals = [(str(t), float(max(0.0, slot_load[t] - instance.power_cap_kw)))
            for t in range(grid.num_slots)]
    worst_entry("site_power_cap", vals)

    total = float(slot_load.sum() * grid.delta_t_hours)
    entries.append(("day_energy_cap", max(0.0, total - instance.energy_cap_kwh)))

    return ResidualReport(tuple(entries))


# ---------------------------------------------------------------------------
# result export

def write_schedule_csv(instance: Instance, result: SolveResult, path) -> None:
    """Wide per-session schedule: id then one kW column per slot."""
    slots = range(instance.grid.num_slots)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id," + ",".join(f"t{t}" for t in slots) + "\n")
        for i, s in enumerate(instance.sessions):
            fh.write(s.id + "," + ",".join(repr(float(v)) for v in result.schedule.kw[i])
                     + "\n")


def write_solution_csv(instance: Instance, result: SolveResult, path) -> None:
    """Per-session solver outcome: shortfall, compensation, active segment."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,phi_kwh,Z_eur,segment\n")
        for i, s in enumerate(instance.sessions):
            seg = result.active_segment[i]
            fh.write(f"{s.id},{float(result.phi[i])!r},{float(result.z[i])!r},"
                     f"{'' if seg is None else seg}\n")


def run_metadata(result: SolveResult, gap_target_eur: float) -> dict:
    return {
        "status": result.status,
        "objective_eur": result.objective,
        "best_bound_eur": result.best_bound,
        "gap_eur": result.gap,
        "gap_target_eur": gap_target_eur,
        "nodes": result.nodes,
        "lp_iterations": result.lp_iterations,
        "wall_time_s": result.wall_time_s,
    }
