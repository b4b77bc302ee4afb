"""Domain types, time-grid arithmetic, settlement, and instance I/O.

The scheduling day is a uniform slot grid.  Sessions declare an energy
requirement at the battery, a tolerated-shortfall fraction, a connection
window, and a compensation curve; the operator schedules grid-side power per
slot under a site power cap and a day energy cap.  Settlement bills each
session for delivered energy and subtracts the compensation owed for the
shortfall, with all money handled in exact decimals after a single
half-to-even rounding of solver floats at the micro-euro.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from decimal import Decimal, ROUND_HALF_EVEN

import numpy as np

from .utility import CurveError, UtilityCurve, evaluate

MONEY_QUANTUM = Decimal("0.000001")  # EUR; solver floats are rounded here once
PHI_TOL_KWH = 1e-6                   # shortfall consistency tolerance
Z_TOL_EUR = 1e-6                     # compensation consistency tolerance


class InstanceFormatError(ValueError):
    """Instance document is malformed; message names the offending field."""


class SettlementError(ValueError):
    """Settlement inputs are inconsistent with the schedule."""


def to_money(value: float) -> Decimal:
    """Round a solver float to exact micro-euros, ties to even."""
    return Decimal(repr(float(value))).quantize(MONEY_QUANTUM, rounding=ROUND_HALF_EVEN)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform scheduling grid: ``num_slots`` slots of ``delta_t_hours`` each."""

    delta_t_hours: float
    num_slots: int
    start: datetime

    def __post_init__(self):
        object.__setattr__(self, "delta_t_hours", float(self.delta_t_hours))
        object.__setattr__(self, "num_slots", int(self.num_slots))

    @property
    def horizon_hours(self) -> float:
        return self.delta_t_hours * self.num_slots

    @property
    def end(self) -> datetime:
        return self.start + timedelta(hours=self.horizon_hours)

    def slot_start(self, slot: int) -> datetime:
        return self.start + timedelta(hours=slot * self.delta_t_hours)


def default_grid(start: datetime) -> TimeGrid:
    """One day of 15-minute slots, the standard day-ahead grid."""
    return TimeGrid(delta_t_hours=0.25, num_slots=96, start=start)


@dataclass(frozen=True)
class SessionSpec:
    """One charging session as the scheduler sees it.

    ``price_eur_per_kwh`` is either a scalar (constant tariff) or a
    per-slot sequence covering the whole grid.  ``gamma`` is the fraction of
    ``required_energy_kwh`` the user must receive at the battery before any
    shortfall beyond it counts as merely tolerated rather than compensable
    at the full-adequacy level; the compensation cap ties to it.
    """

    id: str
    arrival_slot: int
    departure_slot: int
    required_energy_kwh: float
    gamma: float
    max_power_kw: float
    efficiency: float
    price_eur_per_kwh: float | tuple[float, ...]
    utility: UtilityCurve

    def __post_init__(self):
        object.__setattr__(self, "arrival_slot", int(self.arrival_slot))
        object.__setattr__(self, "departure_slot", int(self.departure_slot))
        object.__setattr__(self, "required_energy_kwh", float(self.required_energy_kwh))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "max_power_kw", float(self.max_power_kw))
        object.__setattr__(self, "efficiency", float(self.efficiency))
        price = self.price_eur_per_kwh
        if isinstance(price, (list, tuple, np.ndarray)):
            object.__setattr__(self, "price_eur_per_kwh", tuple(float(p) for p in price))
        else:
            object.__setattr__(self, "price_eur_per_kwh", float(price))

    @property
    def window_slots(self) -> range:
        return range(self.arrival_slot, self.departure_slot + 1)

    def price_array(self, num_slots: int) -> np.ndarray:
        """Per-slot tariff over the full grid, scalar broadcast included."""
        if isinstance(self.price_eur_per_kwh, tuple):
            return np.asarray(self.price_eur_per_kwh, dtype=float)
        return np.full(num_slots, self.price_eur_per_kwh, dtype=float)


def acceptable_energy(session: SessionSpec) -> float:
    """Battery-side kWh the user insists on: gamma * required energy."""
    return session.gamma * session.required_energy_kwh


def min_price(session: SessionSpec) -> float:
    """Lowest tariff over the whole horizon, the compensation-cap price."""
    price = session.price_eur_per_kwh
    if isinstance(price, tuple):
        if not price:
            raise ValueError(f"session {session.id}: empty price series")
        return min(price)
    return float(price)


@dataclass(frozen=True)
class Instance:
    grid: TimeGrid
    sessions: tuple[SessionSpec, ...]
    power_cap_kw: float
    energy_cap_kwh: float

    def __post_init__(self):
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "power_cap_kw", float(self.power_cap_kw))
        object.__setattr__(self, "energy_cap_kwh", float(self.energy_cap_kwh))

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def with_caps(self, power_cap_kw: float | None = None,
                  energy_cap_kwh: float | None = None) -> "Instance":
        """Copy with one or both caps replaced; sessions are shared."""
        return Instance(
            grid=self.grid,
            sessions=self.sessions,
            power_cap_kw=self.power_cap_kw if power_cap_kw is None else power_cap_kw,
            energy_cap_kwh=self.energy_cap_kwh if energy_cap_kwh is None else energy_cap_kwh,
        )


@dataclass(frozen=True)
class Schedule:
    """Grid-side charging power, kW, one row per session, one column per slot."""

    kw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "kw", np.asarray(self.kw, dtype=float))

    def served_grid_kwh(self, grid: TimeGrid) -> np.ndarray:
        """Per-session delivered grid energy over the horizon."""
        return self.kw.sum(axis=1) * grid.delta_t_hours


def snap_to_grid(arrival: datetime, departure: datetime, grid: TimeGrid) -> tuple[int, int]:
    """Snap a timestamp window to (arrival_slot, departure_slot).

    Arrival rounds up to the first slot fully available; departure rounds
    down so charging never runs past it (a departure exactly on a slot
    boundary ends with the previous slot).  A window that collapses under
    these rules degrades to the single slot containing the arrival.
    Timestamps outside the grid horizon are rejected naming the field.
    """
    if departure <= arrival:
        raise ValueError(
            f"departure {departure.isoformat()} not after arrival {arrival.isoformat()}"
        )
    slot_hours = grid.delta_t_hours
    off_a = (arrival - grid.start).total_seconds() / 3600.0 / slot_hours
    off_d = (departure - grid.start).total_seconds() / 3600.0 / slot_hours
    # absorb sub-nanosecond float noise around slot boundaries
    if abs(off_a - round(off_a)) < 1e-9:
        off_a = float(round(off_a))
    if abs(off_d - round(off_d)) < 1e-9:
        off_d = float(round(off_d))
    if off_a < 0.0:
        raise ValueError(f"arrival {arrival.isoformat()} before grid start")
    if off_a >= grid.num_slots:
        raise ValueError(f"arrival {arrival.isoformat()} at or past grid end")
    if off_d > grid.num_slots:
        raise ValueError(f"departure {departure.isoformat()} past grid end")
    a = math.ceil(off_a)
    d = math.ceil(off_d) - 1
    if d < a:
        s = min(math.floor(off_a), grid.num_slots - 1)
        return s, s
    return a, d


@dataclass(frozen=True)
class Violation:
    where: str
    message: str

    def __str__(self):
        return f"{self.where}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "instance valid"
        return "\n".join(str(v) for v in self.violations)


def validate(instance: Instance) -> ValidationReport:
    """Check every structural invariant; an empty report admits solving."""
    out: list[Violation] = []

    def bad(where, message):
        out.append(Violation(where, message))

    grid = instance.grid
    if not (math.isfinite(grid.delta_t_hours) and grid.delta_t_hours > 0):
        bad("grid.delta_t_hours", f"must be > 0, got {grid.delta_t_hours!r}")
    if grid.num_slots < 1:
        bad("grid.num_slots", f"must be >= 1, got {grid.num_slots!r}")
    if not (math.isfinite(instance.power_cap_kw) and instance.power_cap_kw >= 0):
        bad("power_cap_kw", f"must be >= 0, got {instance.power_cap_kw!r}")
    if not (math.isfinite(instance.energy_cap_kwh) and instance.energy_cap_kwh >= 0):
        bad("energy_cap_kwh", f"must be >= 0, got {instance.energy_cap_kwh!r}")

    seen_ids: dict[str, int] = {}
    for i, s in enumerate(instance.sessions):
        where = f"sessions[{i}]"
        if not s.id:
            bad(f"{where}.id", "must be a non-empty string")
        elif s.id in seen_ids:
            bad(f"{where}.id", f"duplicate of sessions[{seen_ids[s.id]}].id ({s.id!r})")
        else:
            seen_ids[s.id] = i
        if not 0 <= s.arrival_slot < grid.num_slots:
            bad(f"{where}.arrival_slot", f"outside 0..{grid.num_slots - 1}: {s.arrival_slot}")
        if not 0 <= s.departure_slot < grid.num_slots:
            bad(f"{where}.departure_slot", f"outside 0..{grid.num_slots - 1}: {s.departure_slot}")
        if s.departure_slot < s.arrival_slot:
            bad(f"{where}.departure_slot", f"before arrival_slot ({s.arrival_slot})")
        if not (math.isfinite(s.required_energy_kwh) and s.required_energy_kwh > 0):
            bad(f"{where}.required_energy_kwh", f"must be > 0, got {s.required_energy_kwh!r}")
        if not (math.isfinite(s.gamma) and 0.0 <= s.gamma <= 1.0):
            bad(f"{where}.gamma", f"must be in [0, 1], got {s.gamma!r}")
        if not (math.isfinite(s.max_power_kw) and s.max_power_kw > 0):
            bad(f"{where}.max_power_kw", f"must be > 0, got {s.max_power_kw!r}")
        if not (math.isfinite(s.efficiency) and 0.0 < s.efficiency <= 1.0):
            bad(f"{where}.efficiency", f"must be in (0, 1], got {s.efficiency!r}")

        price = s.price_eur_per_kwh
        if isinstance(price, tuple):
            if len(price) != grid.num_slots:
                bad(f"{where}.price_eur_per_kwh",
                    f"series length {len(price)} != num_slots {grid.num_slots}")
            elif not all(math.isfinite(p) and p >= 0 for p in price):
                bad(f"{where}.price_eur_per_kwh", "all prices must be finite and >= 0")
        else:
            if not (math.isfinite(price) and price >= 0):
                bad(f"{where}.price_eur_per_kwh", f"must be >= 0, got {price!r}")

        curve = s.utility
        scale = max(1.0, abs(s.required_energy_kwh))
        if abs(curve.max_shortfall - s.required_energy_kwh) > 1e-9 * scale:
            bad(f"{where}.utility",
                f"last breakpoint {curve.max_shortfall!r} != required energy "
                f"{s.required_energy_kwh!r}")
        else:
            try:
                cap_price = min_price(s)
            except ValueError:
                cap_price = None
                bad(f"{where}.price_eur_per_kwh", "empty price series")
            if cap_price is not None:
                cap = cap_price * acceptable_energy(s)
                if curve.max_compensation > cap + 1e-9:
                    bad(f"{where}.utility",
                        f"max compensation {curve.max_compensation!r} exceeds adequacy "
                        f"cap {cap!r} (min price * acceptable energy)")
    return ValidationReport(tuple(out))


@dataclass(frozen=True)
class SessionSettlement:
    id: str
    served_grid_kwh: float
    served_battery_kwh: float
    unserved_kwh: float
    compensation_eur: Decimal
    gross_eur: Decimal
    net_eur: Decimal


@dataclass(frozen=True)
class SettlementReport:
    sessions: tuple[SessionSettlement, ...]
    total_net_eur: Decimal
    total_compensation_eur: Decimal
    total_gross_eur: Decimal
    total_unserved_kwh: float
    total_served_battery_kwh: float
    min_net_eur: Decimal | None
    min_unserved_kwh: float | None
    average_unit_cost_cent_per_kwh: float | None


def settle(instance: Instance, schedule: Schedule, phi, z) -> SettlementReport:
    """Bill every session and aggregate the operator's position.

    ``phi`` (kWh) and ``z`` (EUR) are the solver's per-session shortfall and
    compensation, in session order.  Both are verified against the schedule
    rather than trusted: phi must equal max(0, E - eta*H) and z must price
    phi on the session's curve, each within report tolerances.
    """
    n = instance.num_sessions
    phi = np.asarray(phi, dtype=float)
    z = np.asarray(z, dtype=float)
    if schedule.kw.shape != (n, instance.grid.num_slots):
        raise SettlementError(
            f"schedule shape {schedule.kw.shape} != "
            f"({n}, {instance.grid.num_slots})"
        )
    if phi.shape != (n,) or z.shape != (n,):
        raise SettlementError("phi and z must have one entry per session")

    delta_t = instance.grid.delta_t_hours
    served_grid = schedule.kw.sum(axis=1) * delta_t
    entries = []
    for i, s in enumerate(instance.sessions):
        h = float(served_grid[i])
        expect_phi = max(0.0, s.required_energy_kwh - s.efficiency * h)
        if abs(phi[i] - expect_phi) > PHI_TOL_KWH:
            raise SettlementError(
                f"session {s.id}: shortfall {phi[i]!r} inconsistent with schedule "
                f"(expected {expect_phi!r})"
            )
        phi_c = min(max(float(phi[i]), 0.0), s.required_energy_kwh)
        if not _z_consistent(s.utility, phi_c, float(z[i])):
            raise SettlementError(
                f"session {s.id}: compensation {z[i]!r} inconsistent with curve at "
                f"shortfall {phi_c!r}"
            )
        gross = to_money(float(np.dot(schedule.kw[i], s.price_array(instance.grid.num_slots)))
                         * delta_t)
        comp = to_money(float(z[i]))
        entries.append(SessionSettlement(
            id=s.id,
            served_grid_kwh=h,
            served_battery_kwh=s.efficiency * h,
            unserved_kwh=float(phi[i]),
            compensation_eur=comp,
            gross_eur=gross,
            net_eur=gross - comp,
        ))

    total_gross = sum((e.gross_eur for e in entries), Decimal(0))
    total_comp = sum((e.compensation_eur for e in entries), Decimal(0))
    total_net = total_gross - total_comp
    total_phi = float(sum(e.unserved_kwh for e in entries))
    total_battery = float(sum(e.served_battery_kwh for e in entries))
    avg = 100.0 * float(total_net) / total_battery if total_battery > 0 else None
    return SettlementReport(
        sessions=tuple(entries),
        total_net_eur=total_net,
        total_compensation_eur=total_comp,
        total_gross_eur=total_gross,
        total_unserved_kwh=total_phi,
        total_served_battery_kwh=total_battery,
        min_net_eur=min((e.net_eur for e in entries), default=None),
        min_unserved_kwh=min((e.unserved_kwh for e in entries), default=None),
        average_unit_cost_cent_per_kwh=avg,
    )


def _z_consistent(curve: UtilityCurve, phi: float, z: float) -> bool:
    if abs(z - evaluate(curve, phi)) <= Z_TOL_EUR:
        return True
    # a shortfall sitting numerically on a breakpoint may carry either the
    # breakpoint value or the incoming chord's; accept the breakpoint value
    for k, alpha in enumerate(curve.breakpoints):
        if abs(phi - alpha) <= PHI_TOL_KWH:
            ref = 0.0 if k == 0 else curve.lower_values[k - 1]
            if abs(z - ref) <= Z_TOL_EUR:
                return True
    return False


# ---------------------------------------------------------------------------
# instance documents

def _req(obj: dict, key: str, path: str):
    if key not in obj:
        raise InstanceFormatError(f"{path}.{key} missing")
    return obj[key]


def _num(obj: dict, key: str, path: str) -> float:
    v = _req(obj, key, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise InstanceFormatError(f"{path}.{key} not a number: {v!r}")
    return float(v)


def _int(obj: dict, key: str, path: str) -> int:
    v = _req(obj, key, path)
    if isinstance(v, bool) or not isinstance(v, int):
        raise InstanceFormatError(f"{path}.{key} not an integer: {v!r}")
    return v


def _num_list(obj: dict, key: str, path: str) -> list[float]:
    v = _req(obj, key, path)
    if not isinstance(v, list):
        raise InstanceFormatError(f"{path}.{key} not a list")
    out = []
    for j, item in enumerate(v):
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise InstanceFormatError(f"{path}.{key}[{j}] not a number: {item!r}")
        out.append(float(item))
    return out


def load_instance(path) -> Instance:
    """Read an instance document; malformed content names the field."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InstanceFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InstanceFormatError("top level must be an object")

    grid_doc = _req(doc, "grid", "$")
    if not isinstance(grid_doc, dict):
        raise InstanceFormatError("grid must be an object")
    start_raw = _req(grid_doc, "start", "grid")
    try:
        start = datetime.fromisoformat(str(start_raw))
    except ValueError as exc:
        raise InstanceFormatError(f"grid.start not ISO-8601: {start_raw!r}") from exc
    grid = TimeGrid(
        delta_t_hours=_num(grid_doc, "delta_t_hours", "grid"),
        num_slots=_int(grid_doc, "num_slots", "grid"),
        start=start,
    )

    sessions_doc = _req(doc, "sessions", "$")
    if not isinstance(sessions_doc, list):
        raise InstanceFormatError("sessions must be a list")
    sessions = []
    for i, sdoc in enumerate(sessions_doc):
        path_i = f"sessions[{i}]"
        if not isinstance(sdoc, dict):
            raise InstanceFormatError(f"{path_i} not an object")
        sid = _req(sdoc, "id", path_i)
        if not isinstance(sid, str):
            raise InstanceFormatError(f"{path_i}.id not a string: {sid!r}")
        price = _req(sdoc, "price_eur_per_kwh", path_i)
        if isinstance(price, list):
            price_val: float | tuple = tuple(_num_list(sdoc, "price_eur_per_kwh", path_i))
        elif isinstance(price, bool) or not isinstance(price, (int, float)):
            raise InstanceFormatError(f"{path_i}.price_eur_per_kwh not a number or list")
        else:
            price_val = float(price)
        udoc = _req(sdoc, "utility", path_i)
        if not isinstance(udoc, dict):
            raise InstanceFormatError(f"{path_i}.utility not an object")
        try:
            curve = UtilityCurve(
                breakpoints=tuple(_num_list(udoc, "breakpoints_kwh", f"{path_i}.utility")),
                upper_values=tuple(_num_list(udoc, "upper_values_eur", f"{path_i}.utility")),
                lower_values=tuple(_num_list(udoc, "lower_values_eur", f"{path_i}.utility")),
            )
        except CurveError as exc:
            raise InstanceFormatError(f"{path_i}.utility: {exc}") from exc
        sessions.append(SessionSpec(
            id=sid,
            arrival_slot=_int(sdoc, "arrival_slot", path_i),
            departure_slot=_int(sdoc, "departure_slot", path_i),
            required_energy_kwh=_num(sdoc, "required_energy_kwh", path_i),
            gamma=_num(sdoc, "gamma", path_i),
            max_power_kw=_num(sdoc, "max_power_kw", path_i),
            efficiency=_num(sdoc, "efficiency", path_i),
            price_eur_per_kwh=price_val,
            utility=curve,
        ))

    return Instance(
        grid=grid,
        sessions=tuple(sessions),
        power_cap_kw=_num(doc, "power_cap_kw", "$"),
        energy_cap_kwh=_num(doc, "energy_cap_kwh", "$"),
    )


def save_instance(instance: Instance, path) -> None:
    """Write the instance document; identical instances yield identical bytes."""
    doc = {
        "grid": {
            "delta_t_hours": instance.grid.delta_t_hours,
            "num_slots": instance.grid.num_slots,
            "start": instance.grid.start.isoformat(),
        },
        "power_cap_kw": instance.power_cap_kw,
        "energy_cap_kwh": instance.energy_cap_kwh,
        "sessions": [
            {
                "id": s.id,
                "arrival_slot": s.arrival_slot,
                "departure_slot": s.departure_slot,
                "required_energy_kwh": s.required_energy_kwh,
                "gamma": s.gamma,
                "max_power_kw": s.max_power_kw,
                "efficiency": s.efficiency,
                "price_eur_per_kwh": (list(s.price_eur_per_kwh)
                                      if isinstance(s.price_eur_per_kwh, tuple)
                                      else s.price_eur_per_kwh),
                "utility": {
                    "breakpoints_kwh": list(s.utility.breakpoints),
                    "upper_values_eur": list(s.utility.upper_values),
                    "lower_values_eur": list(s.utility.lower_values),
                },
            }
            for s in instance.sessions
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_settlement_csv(report: SettlementReport, path) -> None:
    """Per-session settlement: id,H_kwh,phi_kwh,Z_eur,gross_eur,pi_eur."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("id,H_kwh,phi_kwh,Z_eur,gross_eur,pi_eur\n")
        for e in report.sessions:
            fh.write(f"{e.id},{e.served_grid_kwh!r},{e.unserved_kwh!r},"
                     f"{e.compensation_eur:.6f},{e.gross_eur:.6f},{e.net_eur:.6f}\n")


def write_aggregate_csv(report: SettlementReport, path) -> None:
    """One-row operator aggregate of the settlement."""
    rho = "nan" if report.min_net_eur is None else f"{report.min_net_eur:.6f}"
    phi_min = "nan" if report.min_unserved_kwh is None else repr(report.min_unserved_kwh)
    avg = ("nan" if report.average_unit_cost_cent_per_kwh is None
           else repr(report.average_unit_cost_cent_per_kwh))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("P_eur,U_eur,served_cost_eur,Phi_kwh,rho_eur,phi_min_kwh,avg_cent_per_kwh\n")
        fh.write(f"{report.total_net_eur:.6f},{report.total_compensation_eur:.6f},"
                 f"{report.total_gross_eur:.6f},{report.total_unserved_kwh!r},"
                 f"{rho},{phi_min},{avg}\n")
