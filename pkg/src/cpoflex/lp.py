"""Bounded-variable revised simplex over sparse rows.

Maximizes a linear objective over columns with finite bounds subject to
two-sided linear rows.  Internally every row gets a slack column
(``a.x - s == 0``) so the all-slack basis is always available; a composite
phase 1 drives the sum of basic bound violations to zero and phase 2 prices
the true objective.  Pricing is Dantzig (most attractive reduced cost) with a
switch to Bland's rule after a run of degenerate pivots, which guarantees
termination on degenerate instances.  The basis representation is an explicit
inverse for small bases and a sparse LU plus product-form eta file above a
size threshold; both refactorize on the same cadence and repair accumulated
drift by recomputing basic values.

Everything is deterministic: ties in pricing and in the ratio test break
toward the lowest column index, and identical inputs replay the identical
pivot sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

PIVOT_TOL = 1e-9        # smallest usable pivot element
DUAL_TOL = 1e-9         # reduced-cost threshold for entering candidates
FEAS_TOL = 1e-7         # relative primal feasibility tolerance
DEGEN_TOL = 1e-9        # step sizes at or below this count as degenerate
BLAND_AFTER = 50        # consecutive degenerate pivots before Bland's rule
REFACTOR_EVERY = 100    # pivots between basis refactorizations
DENSE_LIMIT = 400       # basis dimension at or below which the inverse is dense

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration-limit"

_AT_LO = 0
_AT_UP = 1
_BASIC = 2


class LpError(RuntimeError):
    """Internal solver failure (numerical breakdown or bad input)."""


class LinearProgram:
    """Container for a maximization LP with bounded columns and ranged rows."""

    def __init__(self, name: str = "lp"):
        self.name = name
        self.maximize = True
        self.col_names: list[str] = []
        self._lower: list[float] = []
        self._upper: list[float] = []
        self._objective: list[float] = []
        self.row_names: list[str] = []
        self._row_cols: list[np.ndarray] = []
        self._row_vals: list[np.ndarray] = []
        self._row_lower: list[float] = []
        self._row_upper: list[float] = []
        self._cache: dict | None = None

    # -- construction ------------------------------------------------------

    def add_column(self, name: str, lower: float, upper: float,
                   objective: float = 0.0) -> int:
        lower, upper, objective = float(lower), float(upper), float(objective)
        if not (math.isfinite(lower) and math.isfinite(upper)):
            raise LpError(f"column {name!r}: bounds must be finite")
        if lower > upper:
            raise LpError(f"column {name!r}: lower {lower!r} > upper {upper!r}")
        if not math.isfinite(objective):
            raise LpError(f"column {name!r}: objective must be finite")
        self.col_names.append(name)
        self._lower.append(lower)
        self._upper.append(upper)
        self._objective.append(objective)
        self._cache = None
        return len(self.col_names) - 1

    def add_row(self, name: str, coeffs, lower: float, upper: float) -> int:
        lower, upper = float(lower), float(upper)
        if math.isnan(lower) or math.isnan(upper) or lower > upper:
            raise LpError(f"row {name!r}: bad bounds [{lower!r}, {upper!r}]")
        cols, vals = [], []
        seen = set()
        for col, val in coeffs:
            col = int(col)
            if not 0 <= col < len(self.col_names):
                raise LpError(f"row {name!r}: column index {col} out of range")
            if col in seen:
                raise LpError(f"row {name!r}: duplicate column {col}")
            seen.add(col)
            val = float(val)
            if not math.isfinite(val):
                raise LpError(f"row {name!r}: coefficient for column {col} not finite")
            if val != 0.0:
                cols.append(col)
                vals.append(val)
        self.row_names.append(name)
        self._row_cols.append(np.asarray(cols, dtype=np.int64))
        self._row_vals.append(np.asarray(vals, dtype=float))
        self._row_lower.append(lower)
        self._row_upper.append(upper)
        self._cache = None
        return len(self.row_names) - 1

    @property
    def num_cols(self) -> int:
        return len(self.col_names)

    @property
    def num_rows(self) -> int:
        return len(self.row_names)

    # -- assembled arrays (cached) ------------------------------------------

    def _assembled(self) -> dict:
        if self._cache is not None:
            return self._cache
        n, m = self.num_cols, self.num_rows
        counts = [len(c) for c in self._row_cols]
        nnz = sum(counts)
        rows = np.empty(nnz + m, dtype=np.int64)
        cols = np.empty(nnz + m, dtype=np.int64)
        vals = np.empty(nnz + m, dtype=float)
        pos = 0
        for i in range(m):
            k = counts[i]
            rows[pos:pos + k] = i
            cols[pos:pos + k] = self._row_cols[i]
            vals[pos:pos + k] = self._row_vals[i]
            pos += k
        # slack block: a.x - s == 0
        rows[pos:] = np.arange(m)
        cols[pos:] = n + np.arange(m)
        vals[pos:] = -1.0
        a_full = sp.csc_matrix((vals, (rows, cols)), shape=(m, n + m))
        a_full.sort_indices()
        cache = {
            "a": a_full,
            "at": a_full.T.tocsr(),
            "obj": np.concatenate([np.asarray(self._objective, dtype=float),
                                   np.zeros(m)]),
            "lb": np.concatenate([np.asarray(self._lower, dtype=float),
                                  np.asarray(self._row_lower, dtype=float)]),
            "ub": np.concatenate([np.asarray(self._upper, dtype=float),
                                  np.asarray(self._row_upper, dtype=float)]),
        }
        self._cache = cache
        return cache

    def dump(self, path) -> None:
        """Fixed-format text dump (MPS layout) for offline debugging."""
        cache = self._assembled()
        n, m = self.num_cols, self.num_rows
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"NAME          {self.name}\n")
            fh.write("ROWS\n N  OBJ\n")
            for i, rname in enumerate(self.row_names):
                lo, hi = self._row_lower[i], self._row_upper[i]
                kind = "E" if lo == hi else ("G" if not math.isfinite(hi) else "L")
                fh.write(f" {kind}  R{i:06d}\n")
            fh.write("COLUMNS\n")
            a_csc = cache["a"]
            for j in range(n):
                cname = f"C{j:06d}"
                if self._objective[j] != 0.0:
                    fh.write(f"    {cname}  OBJ  {self._objective[j]!r}\n")
                start, end = a_csc.indptr[j], a_csc.indptr[j + 1]
                for k in range(start, end):
                    fh.write(f"    {cname}  R{a_csc.indices[k]:06d}  {a_csc.data[k]!r}\n")
            fh.write("RHS\n")
            for i in range(m):
                lo, hi = self._row_lower[i], self._row_upper[i]
                rhs = lo if (lo == hi or not math.isfinite(hi)) else hi
                if math.isfinite(rhs) and rhs != 0.0:
                    fh.write(f"    RHS  R{i:06d}  {rhs!r}\n")
            fh.write("RANGES\n")
            for i in range(m):
                lo, hi = self._row_lower[i], self._row_upper[i]
                if lo != hi and math.isfinite(lo) and math.isfinite(hi):
                    fh.write(f"    RNG  R{i:06d}  {hi - lo!r}\n")
            fh.write("BOUNDS\n")
            for j in range(n):
                fh.write(f" LO BND  C{j:06d}  {self._lower[j]!r}\n")
                fh.write(f" UP BND  C{j:06d}  {self._upper[j]!r}\n")
            fh.write("ENDATA\n")


@dataclass(frozen=True)
class BasisToken:
    """Opaque warm-start handle: column states plus basic column ids."""

    state: np.ndarray
    basis: np.ndarray


@dataclass
class LpSolution:
    status: str
    x: np.ndarray
    objective: float
    row_duals: np.ndarray
    reduced_costs: np.ndarray
    dual_objective: float
    iterations: int
    max_primal_residual: float
    basis: BasisToken | None
    infeasible_rows: tuple[int, ...] = ()
    degenerate_pivots: int = 0
    bland_pivots: int = 0
    pivots: list | None = None


class _DenseEngine:
    """Explicit basis inverse, rank-one updated; best for small bases."""

    def __init__(self, m: int):
        self.m = m
        self.binv = np.empty((m, m))

    def refactor(self, b_csc) -> None:
        if self.m == 0:
            return
        dense = b_csc.toarray()
        try:
            self.binv = scipy.linalg.inv(dense)
        except scipy.linalg.LinAlgError as exc:
            raise LpError("singular basis") from exc

    def ftran(self, b: np.ndarray) -> np.ndarray:
        return self.binv @ b

    def ftran_col(self, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
        if len(idx) == 0:
            return np.zeros(self.m)
        return self.binv[:, idx] @ vals

    def btran(self, c: np.ndarray) -> np.ndarray:
        return c @ self.binv

    def update(self, r: int, w: np.ndarray) -> None:
        g = w.copy()
        g[r] -= 1.0
        g /= w[r]
        self.binv -= np.outer(g, self.binv[r])


class _SparseEngine:
    """Sparse LU of the basis plus a product-form eta file."""

    def __init__(self, m: int):
        self.m = m
        self.lu = None
        self.etas: list[tuple[int, np.ndarray, float]] = []

    def refactor(self, b_csc) -> None:
        try:
            self.lu = splu(b_csc.tocsc(), permc_spec="COLAMD")
        except RuntimeError as exc:
            raise LpError("singular basis") from exc
        self.etas = []

    def ftran(self, b: np.ndarray) -> np.ndarray:
        y = self.lu.solve(b)
        for r, w, wr in self.etas:
            t = y[r] / wr
            if t != 0.0:
                y -= w * t
                y[r] = t
            else:
                y[r] = 0.0
        return y

    def ftran_col(self, idx: np.ndarray, vals: np.ndarray) -> np.ndarray:
        b = np.zeros(self.m)
        b[idx] = vals
        return self.ftran(b)

    def btran(self, c: np.ndarray) -> np.ndarray:
        z = c.copy()
        for r, w, wr in reversed(self.etas):
            z[r] = (z[r] * (1.0 + wr) - np.dot(w, z)) / wr
        return self.lu.solve(z, trans="T")

    def update(self, r: int, w: np.ndarray) -> None:
        self.etas.append((r, w.copy(), float(w[r])))


def solve_lp(lp: LinearProgram, max_iters: int | None = None,
             warm: BasisToken | None = None,
             bounds_override: dict[int, tuple[float, float]] | None = None,
             log_pivots: bool = False) -> LpSolution:
    """Solve ``lp`` to proven optimality, infeasibility, or the pivot limit.

    ``warm`` replays a basis from an earlier solve of the same shape (the
    usual branch-and-bound handoff).  ``bounds_override`` tightens structural
    column bounds for this solve only, without touching ``lp``.
    """
    cache = lp._assembled()
    a_full: sp.csc_matrix = cache["a"]
    at_full = cache["at"]
    obj = cache["obj"]
    lb = cache["lb"]
    ub = cache["ub"]
    n, m = lp.num_cols, lp.num_rows
    big_n = n + m

    if bounds_override:
        lb = lb.copy()
        ub = ub.copy()
        for col, (lo, hi) in bounds_override.items():
            if not 0 <= col < n:
                raise LpError(f"bounds override for non-structural column {col}")
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise LpError(f"bad bounds override for column {col}: [{lo!r}, {hi!r}]")
            lb[col] = lo
            ub[col] = hi

    if max_iters is None:
        max_iters = 50 * (n + m) + 10_000

    indptr, indices, data = a_full.indptr, a_full.indices, a_full.data
    engine = _DenseEngine(m) if m <= DENSE_LIMIT else _SparseEngine(m)

    # -- starting point ------------------------------------------------------
    state = np.empty(big_n, dtype=np.int8)
    basis = np.empty(m, dtype=np.int64)
    if warm is not None and warm.state.shape == (big_n,) and warm.basis.shape == (m,):
        state[:] = warm.state
        basis[:] = warm.basis
    else:
        # structural columns rest at the bound of smaller magnitude; the
        # all-slack basis is always nonsingular
        state[:n] = np.where(np.abs(lb[:n]) <= np.abs(ub[:n]), _AT_LO, _AT_UP)
        state[n:] = _BASIC
        basis[:] = n + np.arange(m)

    x = np.zeros(big_n)
    nonbasic = state != _BASIC
    x[nonbasic & (state == _AT_LO)] = lb[nonbasic & (state == _AT_LO)]
    x[nonbasic & (state == _AT_UP)] = ub[nonbasic & (state == _AT_UP)]
    bad = nonbasic & ~np.isfinite(x)
    x[bad] = 0.0

    def refactor_and_refresh():
        engine.refactor(a_full[:, basis])
        if m:
            resid = a_full @ x
            x[basis] -= engine.ftran(resid)

    try:
        refactor_and_refresh()
    except LpError:
        if warm is None:
            raise
        # stale warm basis: restart cold
        state[:n] = np.where(np.abs(lb[:n]) <= np.abs(ub[:n]), _AT_LO, _AT_UP)
        state[n:] = _BASIC
        basis[:] = n + np.arange(m)
        x = np.zeros(big_n)
        lo_mask = state == _AT_LO
        x[:n][lo_mask[:n]] = lb[:n][lo_mask[:n]]
        x[:n][~lo_mask[:n]] = ub[:n][~lo_mask[:n]]
        refactor_and_refresh()

    not_fixed = ub - lb > 0

    iters = 0
    pivots_since_refactor = 0
    consecutive_degen = 0
    bland = False
    degen_total = 0
    bland_total = 0
    pivot_log: list | None = [] if log_pivots else None
    status = ITERATION_LIMIT
    last_pi = np.zeros(m)

    while iters < max_iters:
        iters += 1

        xb = x[basis] if m else np.zeros(0)
        lb_b = lb[basis] if m else np.zeros(0)
        ub_b = ub[basis] if m else np.zeros(0)
        tol_lo = FEAS_TOL * (1.0 + np.abs(lb_b))
        tol_up = FEAS_TOL * (1.0 + np.abs(ub_b))
        infeas_lo = xb < lb_b - tol_lo
        infeas_up = xb > ub_b + tol_up
        in_phase1 = bool(infeas_lo.any() or infeas_up.any())

        if in_phase1:
            # gradient of the infeasibility sum w.r.t. basic values
            g = np.zeros(m)
            g[infeas_lo] = -1.0
            g[infeas_up] = 1.0
            pi = engine.btran(g)
            d = -(at_full @ pi)           # derivative of infeasibility per column
            score = np.where(state == _AT_LO, -d, np.where(state == _AT_UP, d, 0.0))
        else:
            pi = engine.btran(obj[basis]) if m else np.zeros(0)
            last_pi = pi
            d = obj - (at_full @ pi) if m else obj.copy()
            score = np.where(state == _AT_LO, d, np.where(state == _AT_UP, -d, 0.0))
        score[~not_fixed] = 0.0
        score[state == _BASIC] = 0.0

        if bland:
            eligible = score > DUAL_TOL
            if not eligible.any():
                status = INFEASIBLE if in_phase1 else OPTIMAL
                break
            q = int(np.argmax(eligible))
            bland_total += 1
        else:
            q = int(np.argmax(score))
            if score[q] <= DUAL_TOL:
                status = INFEASIBLE if in_phase1 else OPTIMAL
                break

        dirn = 1.0 if state[q] == _AT_LO else -1.0
        col_idx = indices[indptr[q]:indptr[q + 1]]
        col_val = data[indptr[q]:indptr[q + 1]]
        w = engine.ftran_col(col_idx, col_val)

        # ratio test: basics move at -dirn*w per unit step of the entering
        sig = np.nonzero(np.abs(w) > PIVOT_TOL)[0]
        theta_own = ub[q] - lb[q]
        theta = theta_own
        block_pos = -1          # basis position of the blocker, -1 = bound flip
        block_target = 0.0
        if len(sig):
            delta = -dirn * w[sig]
            xi = xb[sig]
            li = lb_b[sig]
            ui = ub_b[sig]
            i_lo = infeas_lo[sig]
            i_up = infeas_up[sig]
            up_target = np.where(i_lo, li, np.where(i_up, np.inf, ui))
            dn_target = np.where(i_up, ui, np.where(i_lo, -np.inf, li))
            target = np.where(delta > 0, up_target, dn_target)
            with np.errstate(invalid="ignore"):
                ratio = (target - xi) / delta
            ratio[~np.isfinite(ratio)] = np.inf
            ratio = np.maximum(ratio, 0.0)
            rmin = ratio.min()
            if rmin < theta:
                theta = rmin
                cands = sig[ratio == rmin]
                cand_cols = basis[cands]
                pick = int(np.argmin(cand_cols))
                block_pos = int(cands[pick])
                block_target = float(target[np.nonzero(ratio == rmin)[0][pick]])
            elif rmin == theta and math.isfinite(theta):
                cands = sig[ratio == rmin]
                cand_cols = basis[cands]
                pick = int(np.argmin(cand_cols))
                if cand_cols[pick] < q:
                    block_pos = int(cands[pick])
                    block_target = float(target[np.nonzero(ratio == rmin)[0][pick]])
        if not math.isfinite(theta):
            raise LpError(f"unbounded improving ray on column {lp.col_names[q] if q < n else q}")

        if theta <= DEGEN_TOL:
            consecutive_degen += 1
            degen_total += 1
            if consecutive_degen >= BLAND_AFTER:
                bland = True
        else:
            consecutive_degen = 0
            bland = False

        if block_pos < 0:
            # entering runs to its opposite bound: a bound flip
            if m and len(sig):
                x[basis[sig]] += (-dirn * theta) * w[sig]
            x[q] = ub[q] if state[q] == _AT_LO else lb[q]
            state[q] = _AT_UP if state[q] == _AT_LO else _AT_LO
            if pivot_log is not None:
                pivot_log.append((q, -1, theta))
        else:
            leaving = int(basis[block_pos])
            x[basis[sig]] += (-dirn * theta) * w[sig]
            x[q] += dirn * theta
            x[leaving] = block_target
            state[leaving] = _AT_LO if block_target == lb[leaving] else _AT_UP
            state[q] = _BASIC
            basis[block_pos] = q
            engine.update(block_pos, w)
            pivots_since_refactor += 1
            if pivot_log is not None:
                pivot_log.append((q, leaving, theta))
            if pivots_since_refactor >= REFACTOR_EVERY:
                refactor_and_refresh()
                pivots_since_refactor = 0

    # -- wrap up ---------------------------------------------------------------
    refactor_and_refresh()
    xb = x[basis] if m else np.zeros(0)
    bound_viol = 0.0
    if m:
        bound_viol = float(np.maximum(
            np.maximum(lb[basis] - xb, xb - ub[basis]), 0.0).max(initial=0.0))
    row_resid = float(np.abs(a_full @ x).max(initial=0.0)) if m else 0.0

    pi = engine.btran(obj[basis]) if m else np.zeros(0)
    d = obj - (at_full @ pi) if m else obj.copy()
    objective = float(np.dot(obj[:n], x[:n]))
    nonbasic_mask = state != _BASIC
    finite_x = np.where(np.isfinite(x), x, 0.0)
    dual_objective = float(np.dot(d[nonbasic_mask], finite_x[nonbasic_mask]))

    infeasible_rows: tuple[int, ...] = ()
    if status == INFEASIBLE:
        g = np.zeros(m)
        tol_lo = FEAS_TOL * (1.0 + np.abs(lb[basis]))
        tol_up = FEAS_TOL * (1.0 + np.abs(ub[basis]))
        g[x[basis] < lb[basis] - tol_lo] = -1.0
        g[x[basis] > ub[basis] + tol_up] = 1.0
        pi1 = engine.btran(g)
        infeasible_rows = tuple(int(i) for i in np.nonzero(np.abs(pi1) > 1e-9)[0])

    if status == OPTIMAL:
        # primal and dual objectives must agree at every reported optimum;
        # disagreement means the factorization went numerically bad
        if abs(objective - dual_objective) > 1e-6 * (1.0 + abs(objective)):
            raise LpError(
                f"weak duality violated: primal {objective!r} vs dual "
                f"{dual_objective!r}"
            )

    return LpSolution(
        status=status,
        x=x[:n].copy(),
        objective=objective,
        row_duals=pi.copy(),
        reduced_costs=d[:n].copy(),
        dual_objective=dual_objective,
        iterations=iters,
        max_primal_residual=max(bound_viol, row_resid),
        basis=BasisToken(state=state.copy(), basis=basis.copy()),
        infeasible_rows=infeasible_rows,
        degenerate_pivots=degen_total,
        bland_pivots=bland_total,
        pivots=pivot_log,
    )


def weak_duality_gap(solution: LpSolution) -> float:
    """Relative primal/dual objective mismatch; tiny at every true optimum."""
    p, dobj = solution.objective, solution.dual_objective
    return abs(p - dobj) / (1.0 + abs(p))
