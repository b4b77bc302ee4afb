"""Synthetic session generation from historical records.

Dependence between arrival time, connection duration and energy demand is
captured with an elliptical copula built on the multivariate Student t:
pairwise Kendall tau from the records fixes the correlation matrix through
the sine map, the tail-weight parameter is picked by maximizing the copula
pseudo-likelihood of the rank data over an integer grid, and marginals stay
fully empirical (inverse ECDF with linear interpolation between order
statistics).

Randomness is counter-based: every attribute draws from its own Philox
stream keyed by a hash of (seed, labels), so adding a new sampled attribute
or skipping an infeasible sample never perturbs draws made elsewhere.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np
from scipy.special import gammaln, stdtrit
from scipy.stats import kendalltau

from .model import SessionSpec, TimeGrid, snap_to_grid
from .utility import UtilityCurve

FEATURES = ("arrival_h", "duration_h", "energy_kwh")
RECORD_HEADER = ("arrival_iso8601", "departure_iso8601", "energy_kwh")
MIN_FIT_RECORDS = 50
NU_GRID = tuple(range(3, 31))

_BETA_EPS = 1e-15
_BETA_TINY = 1e-300
_BETA_MAX_ITERS = 500


class FitRefusalError(ValueError):
    """Fit inputs cannot support a trustworthy dependence estimate."""


class RecordFormatError(ValueError):
    """Records CSV is malformed; message names the offending line."""


def stream(seed: int, *labels) -> np.random.Generator:
    """Independent Philox stream for one (seed, labels...) address."""
    digest = hashlib.blake2b(
        repr((int(seed),) + tuple(labels)).encode("utf-8"), digest_size=16
    ).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


# ---------------------------------------------------------------------------
# Student t CDF via the regularized incomplete beta continued fraction

def _beta_cf(a: float, b: float, x: np.ndarray) -> np.ndarray:
    """Modified Lentz evaluation of the incomplete beta continued fraction."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    np.copyto(d, _BETA_TINY, where=np.abs(d) < _BETA_TINY)
    d = 1.0 / d
    h = d.copy()
    for m in range(1, _BETA_MAX_ITERS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        np.copyto(d, _BETA_TINY, where=np.abs(d) < _BETA_TINY)
        c = 1.0 + aa / c
        np.copyto(c, _BETA_TINY, where=np.abs(c) < _BETA_TINY)
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        np.copyto(d, _BETA_TINY, where=np.abs(d) < _BETA_TINY)
        c = 1.0 + aa / c
        np.copyto(c, _BETA_TINY, where=np.abs(c) < _BETA_TINY)
        d = 1.0 / d
        delta = d * c
        h *= delta
        if np.all(np.abs(delta - 1.0) < _BETA_EPS):
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x) -> np.ndarray:
    """I_x(a, b) for scalar a, b > 0 and x in [0, 1], vectorized over x."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    if np.any((x < 0.0) | (x > 1.0)) or not np.all(np.isfinite(x)):
        raise ValueError("x outside [0, 1]")
    out = np.empty_like(x)
    at_zero = x == 0.0
    at_one = x == 1.0
    out[at_zero] = 0.0
    out[at_one] = 1.0
    interior = ~(at_zero | at_one)
    if np.any(interior):
        xi = x[interior]
        res = np.empty_like(xi)
        ln_beta = gammaln(a) + gammaln(b) - gammaln(a + b)
        direct = xi < (a + 1.0) / (a + b + 2.0)
        if np.any(direct):
            xd = xi[direct]
            front = np.exp(a * np.log(xd) + b * np.log1p(-xd) - ln_beta)
            res[direct] = front * _beta_cf(a, b, xd) / a
        if np.any(~direct):
            xc = xi[~direct]
            front = np.exp(b * np.log1p(-xc) + a * np.log(xc) - ln_beta)
            res[~direct] = 1.0 - front * _beta_cf(b, a, 1.0 - xc) / b
        out[interior] = res
    return out[0] if scalar else out


def student_t_cdf(t, nu: float) -> np.ndarray:
    """CDF of the Student t distribution with ``nu`` degrees of freedom.

    Evaluated through the tail identity with the regularized incomplete beta
    function, so both tails keep full precision; absolute error stays below
    1e-10 across the support.
    """
    if not nu > 0:
        raise ValueError(f"degrees of freedom must be positive, got {nu!r}")
    t = np.asarray(t, dtype=float)
    scalar = t.ndim == 0
    t = np.atleast_1d(t)
    out = np.empty_like(t)
    pos_inf = t == math.inf
    neg_inf = t == -math.inf
    nan = np.isnan(t)
    finite = ~(pos_inf | neg_inf | nan)
    out[pos_inf] = 1.0
    out[neg_inf] = 0.0
    out[nan] = math.nan
    if np.any(finite):
        tf = t[finite]
        x = nu / (nu + tf * tf)
        tail = 0.5 * regularized_incomplete_beta(nu / 2.0, 0.5, x)
        out[finite] = np.where(tf >= 0.0, 1.0 - tail, tail)
    return out[0] if scalar else out


# ---------------------------------------------------------------------------
# empirical marginals

@dataclass(frozen=True)
class EcdfMarginal:
    """Empirical marginal with linear interpolation between order statistics."""

    sorted_values: np.ndarray

    def __post_init__(self):
        values = np.sort(np.asarray(self.sorted_values, dtype=float))
        if values.size < 2:
            raise ValueError("marginal needs at least two observations")
        if not np.all(np.isfinite(values)):
            raise ValueError("marginal observations must be finite")
        object.__setattr__(self, "sorted_values", values)

    @property
    def _probs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.sorted_values.size)

    def inverse(self, u) -> np.ndarray:
        """Quantiles; u outside [0, 1] clamps to the observed extremes."""
        return np.interp(np.asarray(u, dtype=float), self._probs, self.sorted_values)

    def cdf(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=float), self.sorted_values, self._probs)


# ---------------------------------------------------------------------------
# fit

@dataclass(frozen=True)
class CopulaModel:
    corr: np.ndarray
    nu: int
    marginals: tuple[EcdfMarginal, ...]
    columns: tuple[str, ...] = FEATURES


@dataclass(frozen=True)
class FitReport:
    n_records: int
    tau: np.ndarray
    corr: np.ndarray
    nu: int
    loglik_by_nu: tuple[tuple[int, float], ...]


def _nearest_correlation(m: np.ndarray) -> np.ndarray:
    """Project a symmetric matrix onto the PD unit-diagonal cone."""
    sym = 0.5 * (m + m.T)
    for _ in range(4):
        w, v = np.linalg.eigh(sym)
        w = np.maximum(w, 1e-8)
        sym = (v * w) @ v.T
        scale = 1.0 / np.sqrt(np.diag(sym))
        sym = sym * np.outer(scale, scale)
        sym = 0.5 * (sym + sym.T)
        try:
            np.linalg.cholesky(sym)
            return sym
        except np.linalg.LinAlgError:
            sym = sym + 1e-10 * np.eye(sym.shape[0])
    raise FitRefusalError("correlation projection failed to reach a PD matrix")


def _pseudo_observations(data: np.ndarray) -> np.ndarray:
    """Ranks scaled into (0, 1); ties broken by record order, deterministic."""
    n = data.shape[0]
    u = np.empty_like(data)
    for j in range(data.shape[1]):
        order = np.argsort(data[:, j], kind="stable")
        ranks = np.empty(n)
        ranks[order] = np.arange(1, n + 1)
        u[:, j] = ranks / (n + 1.0)
    return u


def _copula_loglik(u: np.ndarray, corr: np.ndarray, nu: int) -> float:
    n, d = u.shape
    q = stdtrit(nu, u)
    sign, logdet = np.linalg.slogdet(corr)
    if sign <= 0:
        return -math.inf
    quad = np.einsum("ij,ij->i", q @ np.linalg.inv(corr), q)
    const = (gammaln((nu + d) / 2.0) + (d - 1) * gammaln(nu / 2.0)
             - d * gammaln((nu + 1) / 2.0) - 0.5 * logdet)
    per = (-(nu + d) / 2.0 * np.log1p(quad / nu)
           + (nu + 1) / 2.0 * np.sum(np.log1p(q * q / nu), axis=1))
    return float(n * const + np.sum(per))


def fit_copula(data: np.ndarray, columns=FEATURES,
               nu_grid=NU_GRID) -> tuple[CopulaModel, FitReport]:
    """Estimate the dependence model from a (records x features) array.

    Refuses outright (rather than degrading silently) when the corpus is too
    small or any feature carries no variation.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2:
        raise ValueError("data must be a 2-d array of records by features")
    n, d = data.shape
    columns = tuple(columns)
    if len(columns) != d:
        raise ValueError("column names do not match the data width")
    if n < MIN_FIT_RECORDS:
        raise FitRefusalError(
            f"{n} records is below the minimum of {MIN_FIT_RECORDS}"
        )
    if not np.all(np.isfinite(data)):
        raise FitRefusalError("records contain non-finite values")
    for j, name in enumerate(columns):
        if np.unique(data[:, j]).size < 2:
            raise FitRefusalError(f"column {name} is constant; ranks are degenerate")

    tau = np.eye(d)
    for i in range(d):
        for j in range(i + 1, d):
            t, _ = kendalltau(data[:, i], data[:, j])
            if not math.isfinite(t):
                raise FitRefusalError(
                    f"Kendall tau undefined for columns {columns[i]}, {columns[j]}"
                )
            tau[i, j] = tau[j, i] = t

    corr = _nearest_correlation(np.sin(0.5 * math.pi * tau))

    u = _pseudo_observations(data)
    scored = [(int(nu), _copula_loglik(u, corr, int(nu))) for nu in nu_grid]
    best_nu = max(scored, key=lambda s: (s[1], -s[0]))[0]

    marginals = tuple(EcdfMarginal(data[:, j]) for j in range(d))
    model = CopulaModel(corr=corr, nu=best_nu, marginals=marginals, columns=columns)
    report = FitReport(n_records=n, tau=tau, corr=corr, nu=best_nu,
                       loglik_by_nu=tuple(scored))
    return model, report


# ---------------------------------------------------------------------------
# sampling

def sample_copula(model: CopulaModel, count: int, seed: int,
                  round_label: int = 0) -> np.ndarray:
    """Draw ``count`` records in feature units from the fitted model."""
    if count < 0:
        raise ValueError("count must be non-negative")
    d = model.corr.shape[0]
    if count == 0:
        return np.empty((0, d))
    chol = np.linalg.cholesky(model.corr)
    normals = stream(seed, "copula", "normals", round_label).standard_normal((count, d))
    chi2 = stream(seed, "copula", "chisq", round_label).chisquare(model.nu, count)
    chi2 = np.maximum(chi2, 1e-300)
    t = (normals @ chol.T) / np.sqrt(chi2 / model.nu)[:, None]
    u = student_t_cdf(t, model.nu)
    out = np.empty((count, d))
    for j in range(d):
        out[:, j] = model.marginals[j].inverse(u[:, j])
    return out


# ---------------------------------------------------------------------------
# utility curve sampling

def random_utility(rng: np.random.Generator, kappa: int, required_energy_kwh: float,
                   compensation_cap_eur: float) -> UtilityCurve:
    """Random admissible curve over [0, E] with payout capped for adequacy.

    Breakpoints are sorted uniforms with a minimum relative spacing (falling
    back to an equal split if spacing keeps failing); values are sorted
    uniforms under the cap threaded through the segment ends so every jump is
    upward and every segment is non-decreasing.
    """
    if kappa < 1:
        raise ValueError("kappa must be at least 1")
    if required_energy_kwh <= 0:
        raise ValueError("required energy must be positive")
    if compensation_cap_eur < 0:
        raise ValueError("compensation cap must be non-negative")
    energy = float(required_energy_kwh)
    spacing = energy * 1e-3
    interior = np.empty(0)
    if kappa > 1:
        for _ in range(100):
            cand = np.sort(rng.uniform(0.0, energy, kappa - 1))
            gaps = np.diff(np.concatenate(([0.0], cand, [energy])))
            if np.all(gaps >= spacing):
                interior = cand
                break
        else:
            interior = np.linspace(0.0, energy, kappa + 1)[1:-1]
    breakpoints = (0.0,) + tuple(float(b) for b in interior) + (energy,)

    seq = np.sort(rng.uniform(0.0, compensation_cap_eur, 2 * kappa))
    seq[0] = 0.0   # the curve must start at zero compensation
    upper = [0.0] + [float(seq[2 * k]) for k in range(1, kappa)]
    lower = [float(seq[2 * k - 1]) for k in range(1, kappa + 1)]
    return UtilityCurve(breakpoints=breakpoints, upper_values=tuple(upper),
                        lower_values=tuple(lower))


# ---------------------------------------------------------------------------
# session generation

@dataclass(frozen=True)
class GenPolicy:
    """Sampling policy for the non-copula session attributes."""

    gamma_low: float = 0.5
    gamma_high: float = 1.0
    participation_threshold: float = 0.99   # gamma below this joins the program
    participating_rate_eur_per_kwh: float = 0.30
    non_participating_rate_eur_per_kwh: float = 0.35
    kappa: int = 4
    max_power_kw: float = 22.0
    efficiency: float = 0.92


@dataclass(frozen=True)
class GenerationReport:
    requested: int
    kept: int
    snap_failures: int
    rounds: int
    records: tuple[tuple[datetime, datetime, float], ...]


def generate_sessions(model: CopulaModel, count: int, seed: int, grid: TimeGrid,
                      policy: GenPolicy | None = None,
                      max_rounds: int = 1000) -> tuple[list[SessionSpec], GenerationReport]:
    """Sample ``count`` feasible sessions for ``grid``.

    Copula draws whose window cannot be snapped onto the grid (for example a
    departure past the horizon) are skipped and replaced by further rounds of
    sampling; the report carries the skip count.  Sampled arrival hours are
    offsets from the grid start.
    """
    policy = policy or GenPolicy()
    if grid.start is None:
        raise ValueError("grid needs a start timestamp to place sessions")
    if not 1 <= count:
        raise ValueError("count must be at least 1")

    sessions: list[SessionSpec] = []
    records: list[tuple[datetime, datetime, float]] = []
    failures = 0
    rounds = 0
    while len(sessions) < count:
        if rounds >= max_rounds:
            raise RuntimeError(
                f"{failures} of {failures + len(sessions)} samples failed to snap; "
                f"the horizon cannot host this corpus"
            )
        need = count - len(sessions)
        batch = sample_copula(model, need, seed, round_label=rounds)
        rounds += 1
        for arrival_h, duration_h, energy in batch:
            if energy <= 0.0 or duration_h <= 0.0:
                failures += 1
                continue
            arrival_dt = grid.start + timedelta(hours=float(arrival_h))
            departure_dt = arrival_dt + timedelta(hours=float(duration_h))
            try:
                a, dep = snap_to_grid(arrival_dt, departure_dt, grid)
            except ValueError:
                failures += 1
                continue
            i = len(sessions)
            gamma = float(stream(seed, "session", i, "gamma").uniform(
                policy.gamma_low, policy.gamma_high))
            participating = gamma < policy.participation_threshold
            rate = (policy.participating_rate_eur_per_kwh if participating
                    else policy.non_participating_rate_eur_per_kwh)
            curve = random_utility(
                stream(seed, "session", i, "utility"), policy.kappa,
                float(energy), rate * gamma * float(energy))
            sessions.append(SessionSpec(
                id=f"s{i:04d}",
                arrival_slot=a,
                departure_slot=dep,
                required_energy_kwh=float(energy),
                gamma=gamma,
                max_power_kw=policy.max_power_kw,
                efficiency=policy.efficiency,
                price_eur_per_kwh=rate,
                utility=curve,
            ))
            records.append((arrival_dt, departure_dt, float(energy)))
            if len(sessions) == count:
                break

    report = GenerationReport(requested=count, kept=len(sessions),
                              snap_failures=failures, rounds=rounds,
                              records=tuple(records))
    return sessions, report


# ---------------------------------------------------------------------------
# records CSV

def load_records(path) -> np.ndarray:
    """Read a records CSV into the (arrival_h, duration_h, energy_kwh) array.

    Arrival hours are measured from midnight of each record's own arrival
    day, so corpora spanning many dates pool into one daily profile.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RECORD_HEADER:
            raise RecordFormatError(
                f"header must be {','.join(RECORD_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise RecordFormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
            try:
                arrival = datetime.fromisoformat(row[0].strip())
                departure = datetime.fromisoformat(row[1].strip())
            except ValueError as exc:
                raise RecordFormatError(f"line {lineno}: {exc}") from exc
            try:
                energy = float(row[2])
            except ValueError:
                raise RecordFormatError(
                    f"line {lineno}: energy_kwh {row[2]!r} is not a number"
                ) from None
            if departure <= arrival:
                raise RecordFormatError(
                    f"line {lineno}: departure not after arrival"
                )
            if not math.isfinite(energy) or energy <= 0:
                raise RecordFormatError(
                    f"line {lineno}: energy_kwh must be positive, got {energy!r}"
                )
            midnight = arrival.replace(hour=0, minute=0, second=0, microsecond=0)
            arrival_h = (arrival - midnight).total_seconds() / 3600.0
            duration_h = (departure - arrival).total_seconds() / 3600.0
            rows.append((arrival_h, duration_h, energy))
    return np.asarray(rows, dtype=float).reshape(-1, 3)


def save_records(path, records) -> None:
    """Write (arrival_dt, departure_dt, energy_kwh) triples as a records CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_HEADER)
        for arrival, departure, energy in records:
            writer.writerow([arrival.isoformat(), departure.isoformat(),
                             repr(float(energy))])
