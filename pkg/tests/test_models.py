import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.errors import ConfigError, SingularPoint, WindowTooSmall
from collapse_lab.models import (
    Euclidean,
    FlatScrewQuotient,
    MultiTaubNut,
    ScrewAngle,
    TaubNut,
    deck_distance,
    flat_inj,
    liouville_angle,
    loop_length,
    model_from_config,
    radial_distance,
    screw_apply,
    shortest_loop,
    shortest_loop_convergents,
    taub_nut_profile,
)

SQRT_BOUND = math.sqrt(1 + 4 * math.pi**2) / 2


def test_screw_apply_full_turn_is_translation():
    out = screw_apply(ScrewAngle.rational(1, 3), 3, np.array([5.0, 0.0, 0.0]))
    np.testing.assert_allclose(out, [5.0, 0.0, 3.0], atol=1e-15)


def test_screw_apply_half_turn():
    np.testing.assert_allclose(screw_apply(math.pi, 1, np.array([2.0, 0.0, 0.0])), [-2.0, 0.0, 1.0], atol=1e-15)


@given(st.floats(0, 2 * math.pi), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_screw_apply_identity_power(theta, p):
    np.testing.assert_array_equal(screw_apply(theta, 0, np.array(p)), np.array(p))


def test_loop_length_examples():
    assert loop_length(ScrewAngle.rational(1, 3), 3, 7.0) == pytest.approx(3.0, abs=1e-15)
    assert loop_length(1.234, 1, 0.0) == pytest.approx(1.0)
    assert loop_length(math.pi, 1, 2.0) == pytest.approx(math.sqrt(17), rel=1e-15)


def test_loop_length_matches_deck_motion():
    rng = np.random.default_rng(0)
    theta = rng.uniform(0, 2 * math.pi, 10_000)
    k = rng.integers(1, 40, 10_000)
    t = rng.uniform(0, 100, 10_000)
    p = np.column_stack([t, np.zeros_like(t), rng.uniform(-1, 1, t.size)])
    oracle = np.array([np.linalg.norm(screw_apply(th, kk, pp) - pp) for th, kk, pp in zip(theta, k, p)])
    got = np.array([loop_length(th, kk, tt) for th, kk, tt in zip(theta, k, t)])
    np.testing.assert_allclose(got, oracle, rtol=1e-12)


def test_flat_inj_examples():
    assert flat_inj(ScrewAngle.rational(1, 3), 10.0) == 1.5
    assert flat_inj(0.0, 37.0) == 0.5
    assert flat_inj(2 * math.pi * (math.sqrt(2) - 1), 100.0) <= SQRT_BOUND * 10


@pytest.mark.parametrize("q", range(1, 13))
def test_rational_plateau(q):
    for p in range(1, q + 1):
        if math.gcd(p, q) != 1:
            continue
        ang = ScrewAngle.rational(p, q)
        start = q / math.sin(math.pi / q) if q > 1 else 0.0
        for t in np.linspace(start, start + 500, 7):
            assert flat_inj(ang, float(t)) == q / 2


@settings(max_examples=300, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(0, 1e4))
def test_sqrt_upper_bound(theta, t):
    assert flat_inj(theta, t) <= SQRT_BOUND * math.sqrt(max(t, 1.0)) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 2 * math.pi - 0.01), st.floats(1, 3e3))
def test_convergent_route_matches_enumeration(theta, t):
    a = shortest_loop(theta, t)
    b = shortest_loop_convergents(theta, t)
    assert a[0] == pytest.approx(b[0], rel=1e-9)


def test_roth_growth_exponent():
    # the profile is log-periodic, so a dense grid is needed for the slope to converge
    ts = np.geomspace(1e2, 1e6, 400)
    vals = np.array([flat_inj(2 * math.pi * (math.sqrt(2) - 1), float(t)) for t in ts])
    slope = np.polyfit(np.log(ts), np.log(vals), 1)[0]
    assert 0 < slope <= 0.5
    ratio = vals / np.sqrt(ts)
    assert ratio.min() > 1.0 and ratio.max() <= SQRT_BOUND


def test_liouville_angle_exact():
    ang = liouville_angle(6)
    assert ang.ratio == sum(Fraction(1, 10 ** math.factorial(n)) for n in range(1, 7))


def test_taub_nut_profile():
    prof = taub_nut_profile()
    assert prof(0.0) == 0.0
    t = np.array([1e-2, 2e-2])
    np.testing.assert_allclose(prof(t) / (t**2 / 2), 1.0, atol=1e-3)
    assert 0.999 <= float(prof.derivative(1e3)) <= 1.0
    # inverse of the closed-form radial distance
    r = np.array([0.3, 4.0, 70.0])
    np.testing.assert_allclose(prof.radius(radial_distance(r)), r, rtol=1e-9)


def test_deck_distance_examples():
    m = FlatScrewQuotient(1.0)
    x = np.array([0.0, 0.0, 0.0])
    assert deck_distance(m, x, x) == 0.0
    assert deck_distance(m, x, np.array([0.0, 0.0, 0.4])) == pytest.approx(0.4)
    m3 = FlatScrewQuotient(ScrewAngle.rational(1, 3))
    x = np.array([10.0, 0.0, 0.0])
    y = screw_apply(m3.theta, 3, x)
    # y is the same point of the quotient; the length-3 loop is the shortest nontrivial one
    assert deck_distance(m3, x, y) == 0.0
    assert np.linalg.norm(y - x) == pytest.approx(3.0, abs=1e-12)
    assert shortest_loop(m3.theta, 10.0) == (pytest.approx(3.0), 3)


def test_deck_distance_window_error():
    m = FlatScrewQuotient(1.0)
    with pytest.raises(WindowTooSmall):
        deck_distance(m, np.zeros(3), np.array([0.0, 0.0, 5.0]), k_window=2)


def _base_block(g):
    """V g_R3: the metric with the fiber component (dpsi + A)^2 / V removed."""
    return g[:3, :3] - np.outer(g[:3, 3], g[:3, 3]) / g[3, 3]


def test_metric_examples():
    g = TaubNut().metric(np.array([[0.5, 0.0, 0.0, 0.0]]))[0]
    np.testing.assert_allclose(_base_block(g), 2.0 * np.eye(3), atol=1e-14)
    assert g[3, 3] == pytest.approx(0.5)
    mt = MultiTaubNut([[0, 0, 1], [0, 0, -1]])
    g = mt.metric(np.array([[1e-3, 0.0, 0.0, 0.0]]))[0]
    np.testing.assert_allclose(_base_block(g), 2.0 * np.eye(3), rtol=1e-5)
    np.testing.assert_array_equal(Euclidean(3).metric(np.zeros((1, 3)))[0], np.eye(3))


def test_singular_points_rejected():
    with pytest.raises(SingularPoint):
        TaubNut().metric(np.array([[0.0, 0.0, 0.0, 0.0]]))
    with pytest.raises(SingularPoint):
        TaubNut().metric(np.array([[0.0, 0.0, -3.0, 0.0]]))


def test_orbit_length_matches_fiber_block():
    tn = TaubNut()
    x = np.array([3.0, -2.0, 5.0, 0.3])
    g = tn.metric(x[None])[0]
    gen = tn.circle_generator(x)
    assert float(tn.orbit_length(x)) == pytest.approx(math.sqrt(gen @ g @ gen), rel=1e-12)


def test_model_from_config():
    assert isinstance(model_from_config({"type": "taub_nut"}), TaubNut)
    m = model_from_config({"type": "flat_screw", "theta_rational": [1, 3]})
    assert m.q == 3
    assert model_from_config({"type": "multi_taub_nut", "nuts": [[0, 0, 1], [0, 0, -1]]}).nuts.shape == (2, 3)
    with pytest.raises(ConfigError) as err:
        model_from_config({"type": "flat_screw", "theta": "x"})
    assert err.value.path == "model.theta"
    with pytest.raises(ConfigError) as err:
        model_from_config({"type": "klein"})
    assert err.value.path == "model.type"
