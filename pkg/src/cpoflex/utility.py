"""Piecewise-linear compensation curves and their mixed-integer encoding.

A curve maps unserved energy (kWh) to the compensation (EUR) a user receives
for tolerating that shortfall.  Curves are lower-semicontinuous: each segment
is linear on a half-open interval that is closed on the right, so the value at
an interior breakpoint is the lower of the two one-sided candidates and jumps
are only upward.  The encoding turns one curve into convex-combination
multiplier columns tied together by one selector binary per segment, which is
what the scheduling model branches on.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from dataclasses import dataclass

VALUE_TOL = 1e-9  # EUR slack for monotonicity and cap comparisons


class CurveError(ValueError):
    """Curve data violates a structural invariant."""


def _finite(values) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class UtilityCurve:
    """Compensation curve with ``kappa`` linear segments.

    Attributes
    ----------
    breakpoints : tuple of float
        Shortfall breakpoints alpha_0..alpha_kappa in kWh, strictly
        increasing, alpha_0 == 0.  The last breakpoint is the session's full
        energy requirement.
    upper_values : tuple of float
        Right-limit values ubar_0..ubar_{kappa-1} in EUR: the value just past
        each breakpoint, i.e. at the open left end of the following segment.
        ubar_0 must be 0 (zero shortfall earns nothing).
    lower_values : tuple of float
        Values ulow_1..ulow_kappa in EUR attained AT each breakpoint from the
        left; by lower semicontinuity these are the curve values at the
        breakpoints themselves.
    """

    breakpoints: tuple[float, ...]
    upper_values: tuple[float, ...]
    lower_values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "breakpoints", tuple(float(v) for v in self.breakpoints))
        object.__setattr__(self, "upper_values", tuple(float(v) for v in self.upper_values))
        object.__setattr__(self, "lower_values", tuple(float(v) for v in self.lower_values))
        bp, up, lo = self.breakpoints, self.upper_values, self.lower_values
        if len(bp) < 2:
            raise CurveError("curve needs at least one segment (two breakpoints)")
        if not (_finite(bp) and _finite(up) and _finite(lo)):
            raise CurveError("curve data must be finite")
        kappa = len(bp) - 1
        if len(up) != kappa or len(lo) != kappa:
            raise CurveError(
                f"value counts must match {kappa} segments: "
                f"got {len(up)} upper and {len(lo)} lower values"
            )
        if bp[0] != 0.0:
            raise CurveError(f"first breakpoint must be 0, got {bp[0]!r}")
        for k in range(1, kappa + 1):
            if bp[k] <= bp[k - 1]:
                raise CurveError(
                    f"segment {k}: degenerate or decreasing width "
                    f"({bp[k - 1]!r} -> {bp[k]!r})"
                )
        if abs(up[0]) > VALUE_TOL:
            raise CurveError(f"value just past zero shortfall must be 0, got {up[0]!r}")
        if min(up) < -VALUE_TOL or min(lo) < -VALUE_TOL:
            raise CurveError("compensation values must be non-negative")
        for k in range(1, kappa + 1):
            if lo[k - 1] < up[k - 1] - VALUE_TOL:
                raise CurveError(
                    f"segment {k}: decreasing within segment "
                    f"({up[k - 1]!r} -> {lo[k - 1]!r})"
                )
        for k in range(1, kappa):
            if up[k] < lo[k - 1] - VALUE_TOL:
                raise CurveError(
                    f"segment {k + 1}: downward jump at breakpoint "
                    f"({lo[k - 1]!r} -> {up[k]!r})"
                )

    @property
    def kappa(self) -> int:
        """Number of linear segments."""
        return len(self.breakpoints) - 1

    @property
    def max_shortfall(self) -> float:
        """Right end of the domain (kWh)."""
        return self.breakpoints[-1]

    @property
    def max_compensation(self) -> float:
        """Largest payable compensation, attained at full shortfall (EUR)."""
        return self.lower_values[-1]


def evaluate(curve: UtilityCurve, phi: float) -> float:
    """Curve value at shortfall ``phi`` kWh.

    Segments own half-open intervals closed on the right, so at an interior
    breakpoint the value is the left segment's endpoint value (the lower of
    the two candidates).  ``phi`` outside [0, max_shortfall] is a domain
    error; callers holding solver floats clamp before calling.
    """
    bp = curve.breakpoints
    if not math.isfinite(phi) or phi < 0.0 or phi > bp[-1]:
        raise ValueError(f"shortfall {phi!r} outside curve domain [0, {bp[-1]!r}]")
    if phi == 0.0:
        return 0.0
    k = bisect_left(bp, phi)  # phi in (bp[k-1], bp[k]]
    if phi == bp[k]:
        return curve.lower_values[k - 1]
    left = curve.upper_values[k - 1]
    right = curve.lower_values[k - 1]
    t = (phi - bp[k - 1]) / (bp[k] - bp[k - 1])
    return left + t * (right - left)


def segment_of(curve: UtilityCurve, phi: float) -> int | None:
    """Index (1-based) of the segment owning ``phi``, None for phi == 0."""
    bp = curve.breakpoints
    if not math.isfinite(phi) or phi < 0.0 or phi > bp[-1]:
        raise ValueError(f"shortfall {phi!r} outside curve domain [0, {bp[-1]!r}]")
    if phi == 0.0:
        return None
    return bisect_left(bp, phi)


def chord(curve: UtilityCurve, k: int, phi: float) -> float:
    """Value of segment ``k``'s closed chord at ``phi``.

    The chord runs from (alpha_{k-1}, ubar_{k-1}) to (alpha_k, ulow_k); it is
    what the encoding produces when segment k's selector is active, and it
    matches evaluate() everywhere except the left endpoint.
    """
    bp = curve.breakpoints
    if not 1 <= k <= curve.kappa:
        raise ValueError(f"segment index {k} outside 1..{curve.kappa}")
    if phi < bp[k - 1] - VALUE_TOL or phi > bp[k] + VALUE_TOL:
        raise ValueError(f"shortfall {phi!r} outside segment {k}")
    t = (phi - bp[k - 1]) / (bp[k] - bp[k - 1])
    t = min(1.0, max(0.0, t))
    left = curve.upper_values[k - 1]
    right = curve.lower_values[k - 1]
    return left + t * (right - left)


def check_cap(curve: UtilityCurve, min_price: float, acceptable_energy: float) -> bool:
    """True iff full-shortfall compensation stays within the adequacy cap.

    The cap is min_price * acceptable_energy EUR; keeping the largest payout
    at or below it is what guarantees a non-negative net charge for every
    user served at least their acceptable energy.
    """
    return curve.max_compensation <= min_price * acceptable_energy + VALUE_TOL


def from_slopes(slopes, intercepts, breakpoints) -> UtilityCurve:
    """Build a curve from per-segment slope/intercept (EUR/kWh, EUR) form.

    Segment k's endpoint values are h_k * alpha + b_k evaluated at its two
    breakpoints.  Invalid geometry raises CurveError naming the segment.
    """
    slopes = [float(h) for h in slopes]
    intercepts = [float(b) for b in intercepts]
    bp = [float(a) for a in breakpoints]
    if len(slopes) != len(intercepts) or len(slopes) != len(bp) - 1:
        raise CurveError(
            f"need one slope/intercept pair per segment: "
            f"{len(slopes)} slopes, {len(intercepts)} intercepts, {len(bp) - 1} segments"
        )
    upper = [slopes[k] * bp[k] + intercepts[k] for k in range(len(slopes))]
    lower = [slopes[k] * bp[k + 1] + intercepts[k] for k in range(len(slopes))]
    if abs(upper[0]) <= VALUE_TOL:
        upper[0] = 0.0
    return UtilityCurve(tuple(bp), tuple(upper), tuple(lower))


@dataclass(frozen=True)
class EncodedUtility:
    """Column/row description of one curve's mixed-integer encoding.

    Local column order: kappa+1 lower multipliers (one per breakpoint),
    kappa upper multipliers (one per interior-or-zero breakpoint), kappa
    selector binaries (one per segment).  Activating segment k's binary
    confines the shortfall to that segment and prices it on the segment's
    chord; all binaries off forces zero shortfall and zero compensation.
    """

    curve: UtilityCurve
    lower_costs: tuple[float, ...]   # EUR weight of each lower multiplier
    upper_costs: tuple[float, ...]   # EUR weight of each upper multiplier
    lower_breaks: tuple[float, ...]  # kWh weight of each lower multiplier
    upper_breaks: tuple[float, ...]  # kWh weight of each upper multiplier

    @property
    def kappa(self) -> int:
        return self.curve.kappa

    @property
    def num_multipliers(self) -> int:
        return 2 * self.kappa + 1

    @property
    def num_binaries(self) -> int:
        return self.kappa

    @property
    def num_rows(self) -> int:
        # compensation link, shortfall link, convexity, kappa selector links,
        # one selector cardinality row
        return self.kappa + 4

    def rows(self, lam_lo, lam_up, y, phi_col: int, z_col: int):
        """Yield (name, coeffs, lower, upper) rows over caller column ids.

        ``lam_lo``/``lam_up``/``y`` are sequences of global column indices for
        the local multiplier and binary blocks; ``phi_col``/``z_col`` are the
        columns holding the session's shortfall and compensation.
        """
        kappa = self.kappa
        if len(lam_lo) != kappa + 1 or len(lam_up) != kappa or len(y) != kappa:
            raise ValueError("column id blocks do not match the curve's segment count")

        coeffs = [(z_col, 1.0)]
        for k in range(kappa + 1):
            if self.lower_costs[k] != 0.0:
                coeffs.append((lam_lo[k], -self.lower_costs[k]))
        for k in range(kappa):
            if self.upper_costs[k] != 0.0:
                coeffs.append((lam_up[k], -self.upper_costs[k]))
        yield ("z_link", coeffs, 0.0, 0.0)

        coeffs = [(phi_col, 1.0)]
        for k in range(kappa + 1):
            if self.lower_breaks[k] != 0.0:
                coeffs.append((lam_lo[k], -self.lower_breaks[k]))
        for k in range(kappa):
            if self.upper_breaks[k] != 0.0:
                coeffs.append((lam_up[k], -self.upper_breaks[k]))
        yield ("phi_link", coeffs, 0.0, 0.0)

        coeffs = [(c, 1.0) for c in lam_lo] + [(c, 1.0) for c in lam_up]
        yield ("convexity", coeffs, 1.0, 1.0)

        for k in range(1, kappa + 1):
            coeffs = [(lam_up[k - 1], 1.0), (lam_lo[k], 1.0), (y[k - 1], -1.0)]
            yield (f"link[{k}]", coeffs, 0.0, 0.0)

        yield ("cardinality", [(c, 1.0) for c in y], -math.inf, 1.0)


def encode(curve: UtilityCurve) -> EncodedUtility:
    """Encoding data for ``curve``; see EncodedUtility for the layout."""
    kappa = curve.kappa
    lower_costs = (0.0,) + curve.lower_values          # ulow_0 := 0
    upper_costs = curve.upper_values
    lower_breaks = curve.breakpoints
    upper_breaks = curve.breakpoints[:kappa]
    return EncodedUtility(curve, lower_costs, upper_costs, lower_breaks, upper_breaks)
