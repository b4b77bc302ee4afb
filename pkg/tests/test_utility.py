"""Compensation-curve behavior: construction, evaluation, encoding."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cpoflex.datagen import random_utility
from cpoflex.utility import (CurveError, UtilityCurve, check_cap, chord,
                             encode, evaluate, from_slopes, segment_of)

from helpers import encoding_min_z, pattern_min_z, single_segment_curve, \
    two_segment_curve


def lsc_oracle(curve: UtilityCurve, phi: float) -> float:
    """Direct piecewise evaluation honoring right-closed segment intervals."""
    if phi == 0.0:
        return 0.0
    bp, up, lo = curve.breakpoints, curve.upper_values, curve.lower_values
    for k in range(1, len(bp)):
        if bp[k - 1] < phi <= bp[k]:
            t = (phi - bp[k - 1]) / (bp[k] - bp[k - 1])
            return up[k - 1] + t * (lo[k - 1] - up[k - 1])
    raise AssertionError(f"phi {phi} outside curve domain")


# ---------------------------------------------------------------------------
# construction

def test_curve_requires_two_breakpoints():
    with pytest.raises(CurveError):
        UtilityCurve(breakpoints=(0.0,), upper_values=(), lower_values=())


def test_curve_requires_zero_origin():
    with pytest.raises(CurveError):
        UtilityCurve(breakpoints=(1.0, 2.0), upper_values=(0.0,),
                     lower_values=(1.0,))
    with pytest.raises(CurveError):
        UtilityCurve(breakpoints=(0.0, 2.0), upper_values=(0.5,),
                     lower_values=(1.0,))


def test_curve_rejects_degenerate_segment():
    with pytest.raises(CurveError):
        UtilityCurve(breakpoints=(0.0, 5.0, 5.0), upper_values=(0.0, 1.0),
                     lower_values=(1.0, 2.0))


def test_curve_rejects_downward_jump():
    # value entering segment 2 (0.5) below segment 1's right endpoint (1.0)
    with pytest.raises(CurveError):
        UtilityCurve(breakpoints=(0.0, 5.0, 10.0), upper_values=(0.0, 0.5),
                     lower_values=(1.0, 2.0))


def test_curve_rejects_decreasing_segment():
    with pytest.raises(CurveError):
        UtilityCurve(breakpoints=(0.0, 10.0), upper_values=(0.0,),
                     lower_values=(-1.0,))


# ---------------------------------------------------------------------------
# evaluate

def test_evaluate_zero_is_zero():
    assert evaluate(two_segment_curve(), 0.0) == 0.0


def test_evaluate_single_segment_midpoint():
    curve = single_segment_curve(10.0, 3.0)
    assert_allclose(evaluate(curve, 5.0), 1.5, rtol=0, atol=1e-12)


def test_evaluate_breakpoint_takes_lower_value():
    # at the jump the curve pays the cheaper left-limit value
    curve = two_segment_curve()
    assert_allclose(evaluate(curve, 5.0), 1.0, rtol=0, atol=1e-12)
    assert_allclose(evaluate(curve, 5.0), lsc_oracle(curve, 5.0),
                    rtol=0, atol=1e-12)


def test_evaluate_domain_error():
    curve = two_segment_curve()
    with pytest.raises(ValueError):
        evaluate(curve, -0.1)
    with pytest.raises(ValueError):
        evaluate(curve, 10.1)


@pytest.mark.parametrize("seed", range(8))
def test_evaluate_matches_piecewise_oracle(seed):
    rng = np.random.default_rng(seed)
    kappa = int(rng.integers(1, 5))
    energy = float(rng.uniform(5.0, 40.0))
    curve = random_utility(rng, kappa, energy, float(rng.uniform(0.5, 8.0)))
    for phi in np.linspace(0.0, energy, 101):
        assert_allclose(evaluate(curve, float(phi)),
                        lsc_oracle(curve, float(phi)), rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_evaluate_monotone_with_max_at_full_shortfall(seed):
    rng = np.random.default_rng(100 + seed)
    energy = float(rng.uniform(5.0, 40.0))
    curve = random_utility(rng, int(rng.integers(1, 5)), energy,
                           float(rng.uniform(0.5, 8.0)))
    grid = np.linspace(0.0, energy, 200)
    values = [evaluate(curve, float(p)) for p in grid]
    assert all(b >= a - 1e-12 for a, b in zip(values, values[1:]))
    assert_allclose(values[-1], curve.max_compensation, rtol=0, atol=1e-12)
    assert max(values) <= curve.max_compensation + 1e-12


def test_segment_of_conventions():
    curve = two_segment_curve()
    assert segment_of(curve, 0.0) is None
    assert segment_of(curve, 3.0) == 1
    assert segment_of(curve, 5.0) == 1   # right-closed interval
    assert segment_of(curve, 7.0) == 2
    assert segment_of(curve, 10.0) == 2


# ---------------------------------------------------------------------------
# check_cap

@pytest.mark.parametrize("final,ok", [(1.5, True), (1.6, False)])
def test_check_cap_boundary(final, ok):
    curve = single_segment_curve(10.0, final)
    assert check_cap(curve, 0.30, 5.0) is ok


def test_check_cap_zero_acceptable_energy():
    curve = single_segment_curve(10.0, 0.5)
    assert check_cap(curve, 0.30, 0.0) is False
    assert check_cap(single_segment_curve(10.0, 0.0), 0.30, 0.0) is True


# ---------------------------------------------------------------------------
# from_slopes

def test_from_slopes_single_segment():
    curve = from_slopes([0.3], [0.0], [0.0, 10.0])
    assert_allclose(curve.lower_values, (3.0,), rtol=0, atol=1e-12)
    assert_allclose(curve.upper_values, (0.0,), rtol=0, atol=1e-12)


def test_from_slopes_intercept_shift_is_jump():
    curve = from_slopes([0.1, 0.1], [0.0, 0.5], [0.0, 5.0, 10.0])
    assert_allclose(curve.lower_values[0], 0.5, rtol=0, atol=1e-12)
    assert_allclose(curve.upper_values[1], 1.0, rtol=0, atol=1e-12)
    # jump of 0.5 at phi = 5: right limit minus the value at the breakpoint
    assert_allclose(curve.upper_values[1] - curve.lower_values[0], 0.5,
                    rtol=0, atol=1e-12)


def test_from_slopes_rejects_decreasing_segment():
    with pytest.raises(CurveError):
        from_slopes([-0.1], [0.0], [0.0, 10.0])
    with pytest.raises(CurveError, match="segment 2"):
        from_slopes([0.1, -0.1], [0.0, 2.5], [0.0, 5.0, 10.0])


# ---------------------------------------------------------------------------
# encoding

def test_encode_counts_for_kappa_four():
    rng = np.random.default_rng(7)
    curve = random_utility(rng, 4, 20.0, 3.0)
    enc = encode(curve)
    assert enc.num_multipliers == 9
    assert enc.num_binaries == 4
    assert enc.num_rows == 4 + 4

    kappa = 4
    lam_lo = list(range(kappa + 1))
    lam_up = list(range(kappa + 1, 2 * kappa + 1))
    y = list(range(2 * kappa + 1, 3 * kappa + 1))
    rows = list(enc.rows(lam_lo, lam_up, y, 100, 101))
    names = [r[0] for r in rows]
    assert names == ["z_link", "phi_link", "convexity",
                     "link[1]", "link[2]", "link[3]", "link[4]", "cardinality"]


def test_encode_all_selectors_off_forces_zero():
    # hand solve: y = 0 kills every paired multiplier, convexity leaves
    # weight 1 on the origin, so phi = 0 and Z = 0
    curve = two_segment_curve()
    assert_allclose(encoding_min_z(curve, 0.0), 0.0, rtol=0, atol=1e-9)
    assert encoding_min_z(curve, 3.0) < math.inf   # needs a selector on


def test_encode_half_weights_reach_segment_midpoint():
    # y_1 = 1 with equal endpoint weights lands on the chord midpoint
    curve = single_segment_curve(10.0, 3.0)
    enc = encode(curve)
    lam = {"lo": [0.0, 0.5], "up": [0.5]}
    phi = (lam["lo"][0] + lam["up"][0]) * 0.0 + lam["lo"][1] * 10.0
    z = lam["up"][0] * curve.upper_values[0] + lam["lo"][1] * curve.lower_values[0]
    assert_allclose(phi, 5.0, rtol=0, atol=1e-12)
    assert_allclose(z, 1.5, rtol=0, atol=1e-12)
    assert_allclose(encoding_min_z(curve, 5.0), 1.5, rtol=0, atol=1e-9)
    assert enc.lower_breaks == curve.breakpoints


@pytest.mark.parametrize("seed", range(6))
def test_encoding_min_matches_evaluate_on_grid(seed):
    rng = np.random.default_rng(200 + seed)
    kappa = int(rng.integers(1, 5))
    energy = float(rng.uniform(4.0, 30.0))
    curve = random_utility(rng, kappa, energy, float(rng.uniform(0.5, 6.0)))
    breakset = set(curve.breakpoints)
    for phi in list(np.linspace(0.0, energy, 41)) + list(curve.breakpoints):
        phi = float(phi)
        expected = (evaluate(curve, phi) if phi not in breakset or phi == 0.0
                    else curve.lower_values[curve.breakpoints.index(phi) - 1])
        assert_allclose(pattern_min_z(curve, phi), expected, rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_encoded_rows_price_like_closed_form(seed):
    # LP route over the real encoded rows agrees with the chord oracle
    rng = np.random.default_rng(300 + seed)
    kappa = int(rng.integers(1, 5))
    energy = float(rng.uniform(4.0, 30.0))
    curve = random_utility(rng, kappa, energy, float(rng.uniform(0.5, 6.0)))
    for phi in np.linspace(0.0, energy, 9):
        assert_allclose(encoding_min_z(curve, float(phi)),
                        pattern_min_z(curve, float(phi)), rtol=0, atol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_feasible_assignments_never_beat_the_curve(seed):
    # any on-segment weight choice prices at or above the curve value, with
    # equality exactly on the matching segment's chord
    rng = np.random.default_rng(400 + seed)
    energy = float(rng.uniform(4.0, 30.0))
    curve = random_utility(rng, int(rng.integers(2, 5)), energy,
                           float(rng.uniform(0.5, 6.0)))
    for k in range(1, curve.kappa + 1):
        for t in rng.uniform(0.0, 1.0, 8):
            a, b = curve.breakpoints[k - 1], curve.breakpoints[k]
            phi = a + t * (b - a)
            z = chord(curve, k, phi)
            assert z >= evaluate(curve, phi) - 1e-9
            if a < phi <= b:
                assert_allclose(z, evaluate(curve, phi), rtol=0, atol=1e-9)
