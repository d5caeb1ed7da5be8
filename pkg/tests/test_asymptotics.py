import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.asymptotics import (
    ball_volume,
    continued_fraction_of,
    decay_fit,
    inj_profile,
    pigeonhole_k,
    plateau_sequence,
    weighted_curvature_integral,
    _radius_for_distance,
)
from collapse_lab.errors import ChartExceeded, EmptyWindow, NonPositiveValue
from collapse_lab.models import (
    Euclidean,
    FlatScrewQuotient,
    ScrewAngle,
    TaubNut,
    flat_inj,
    liouville_angle,
)

TN = TaubNut()


def test_decay_fit_exact_power_law():
    ts = np.geomspace(10, 100, 7)
    fit = decay_fit(list(zip(ts, 3.0 * ts**-2.5)))
    assert fit.exponent == pytest.approx(-2.5, abs=1e-12)
    assert fit.log_constant == pytest.approx(math.log(3.0), abs=1e-12)
    assert fit.residual <= 1e-12
    assert fit.n_points == 7


def test_decay_fit_constant():
    fit = decay_fit([(t, 1.5) for t in range(1, 8)])
    assert fit.exponent == pytest.approx(0.0, abs=1e-14)


def test_decay_fit_window_drops_smallest_decade_only_for_wide_data():
    ts = np.geomspace(1, 1e3, 13)
    fit = decay_fit(list(zip(ts, ts**-1.0)))
    assert fit.window == (10.0, 1e3)
    assert fit.n_points == 9


def test_decay_fit_errors():
    with pytest.raises(EmptyWindow):
        decay_fit([(1, 1), (2, 2), (3, 3)])
    with pytest.raises(NonPositiveValue):
        decay_fit([(t, 0.0 if t == 3 else 1.0) for t in range(1, 8)])


@pytest.mark.parametrize("x,coeffs", [
    (Fraction(1, 3), [0, 3]),
    (Fraction(415, 93), [4, 2, 6, 7]),
])
def test_continued_fraction_rationals(x, coeffs):
    cf = continued_fraction_of(x, depth=None)
    assert cf.coefficients == coeffs
    assert cf.convergents[-1] == x


def test_continued_fraction_quadratic_irrationals():
    assert continued_fraction_of(math.sqrt(2) - 1, depth=12).coefficients == [0] + [2] * 11
    assert continued_fraction_of((1 + math.sqrt(5)) / 2, depth=12).coefficients == [1] * 12


@settings(max_examples=100, deadline=None)
@given(st.floats(0.001, 0.999))
def test_convergent_recurrence_and_bound(x):
    cf = continued_fraction_of(x, depth=15)
    p, q = cf.numerators, cf.denominators
    for n in range(1, len(p)):
        assert p[n] * q[n - 1] - p[n - 1] * q[n] == (-1) ** (n + 1)
        assert abs(Fraction(x) - Fraction(p[n], q[n])) <= Fraction(1, q[n] * q[n])


def test_continued_fraction_depth_limit():
    with pytest.raises(ValueError):
        continued_fraction_of(0.3, depth=41)


def test_pigeonhole_examples():
    assert pigeonhole_k(ScrewAngle.rational(1, 3), 100.0) == 3
    assert pigeonhole_k(0.0, 25.0) == 1
    with pytest.raises(ValueError):
        pigeonhole_k(1.0, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(1, 1e6))
def test_pigeonhole_always_succeeds(theta, t):
    k = pigeonhole_k(theta, t)
    assert 1 <= k <= max(1, math.isqrt(int(t)))


def test_liouville_plateau_sequence_decreasing():
    ang = liouville_angle(6)
    ts, q = plateau_sequence(ang, n_terms=5)
    assert q == 10**24
    ratios = [flat_inj(ang, float(t)) / float(t) ** 0.05 for t in ts]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))


def test_euclidean_ball_volume():
    est = ball_volume(Euclidean(3), [0.0, 0.0, 0.0], 2.0, samples=400_000, seed=1)
    assert est.value == pytest.approx(32 * math.pi / 3, abs=4 * est.std_error)
    assert est.std_error / est.value <= 0.01


def test_ball_volume_deterministic_and_thread_independent():
    a = ball_volume(Euclidean(3), [0.0, 0.0, 0.0], 1.0, samples=120_000, seed=7, threads=1)
    b = ball_volume(Euclidean(3), [0.0, 0.0, 0.0], 1.0, samples=120_000, seed=7, threads=4)
    assert (a.value, a.std_error) == (b.value, b.std_error)


def test_flat_ball_volume_monotone_and_small_ball_exact():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 3))
    x = [10.0, 0.0, 0.0]
    vols = [ball_volume(m, x, t, samples=100_000, seed=3).value for t in (0.5, 1.0, 2.0, 4.0)]
    assert all(a < b for a, b in zip(vols, vols[1:]))
    # below the injectivity radius the ball is Euclidean
    small = ball_volume(m, x, 1.0, samples=400_000, seed=5)
    assert small.value == pytest.approx(4 * math.pi / 3, abs=4 * small.std_error)


def test_taub_nut_ball_volume_matches_quadrature():
    t = 20.0
    R = _radius_for_distance(t)
    oracle = 8 * math.pi**2 * (R**3 / 3 + R**2 / 4)
    est = ball_volume(TN, [0.0, 0.0, 0.0, 0.0], t, samples=200_000, seed=2)
    assert est.value == pytest.approx(oracle, abs=4 * est.std_error)
    with pytest.raises(ChartExceeded):
        ball_volume(TN, [1.0, 0.0, 0.0, 0.0], t)


def test_weighted_curvature_integral():
    assert weighted_curvature_integral(FlatScrewQuotient(1.0), 10, 100).value == 0.0
    inner = weighted_curvature_integral(TN, 10, 20, samples=250, seed=1)
    outer = weighted_curvature_integral(TN, 20, 40, samples=250, seed=1)
    # the integrand decays like r^-3, so each doubling of the shell shrinks it about fourfold
    assert inner.value > 0 and outer.value > 0
    assert inner.value / outer.value == pytest.approx(4.0, rel=0.25)


def test_inj_profile_kinds():
    (e,) = inj_profile(Euclidean(3), [[1.0, 0.0, 0.0]])
    assert e.infinite and e.inj == math.inf
    prof = inj_profile(FlatScrewQuotient(ScrewAngle.rational(1, 3)), [[t, 0.0, 0.0] for t in (10.0, 20.0)])
    assert [s.inj for s in prof] == [1.5, 1.5]
    (tn,) = inj_profile(TN, [[12.0, 0.0, 16.0, 0.0]])
    assert tn.inj == pytest.approx(0.5 * float(TN.orbit_length(np.array([12.0, 0.0, 16.0, 0.0]))), rel=1e-4)
    assert tn.incomplete
