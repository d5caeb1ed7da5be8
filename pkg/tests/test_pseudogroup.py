import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.asymptotics import ball_volume
from collapse_lab.errors import LeftBall, ScaleTooLarge
from collapse_lab.models import (
    Euclidean,
    FlatScrewQuotient,
    ScrewAngle,
    TaubNut,
    flat_inj,
    loop_length,
    screw_apply,
)
from collapse_lab.pseudogroup import (
    build_pseudo_group,
    covering_volume_check,
    fundamental_domain_test,
    fundamental_domain_volume,
    holonomy_defect,
    lift_count,
    loop_iterate_translation_defect,
    min_displacement,
    sub_pseudo_group,
    tau_apply,
    translation_defect,
    slab_bounds,
)

TN = TaubNut()


def _ball_sample(rng, n, radius, d=3):
    u = rng.normal(size=(n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * radius * rng.uniform(size=(n, 1)) ** (1 / d)


@pytest.fixture(scope="module")
def tn_ball():
    x = np.array([30.0, 0.0, 40.0, 0.2])
    return build_pseudo_group(TN, x, 10.0)


def test_euclidean_group_is_trivial():
    ball = build_pseudo_group(Euclidean(3), [1.0, 2.0, 3.0], 5.0)
    assert [e.word_power for e in ball.elements] == [0]
    assert lift_count(ball, [1.5, 2.0, 3.0]) == 1
    w = np.array([0.3, -0.2, 0.1])
    np.testing.assert_array_equal(tau_apply(ball, ball.elements[0], w), w)


def test_flat_enumeration_example():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 5))
    ball = build_pseudo_group(m, [3.0, 0.0, 0.0], 12.0)
    words = sorted(e.word_power for e in ball.elements)
    oracle = [k for k in range(-40, 41) if k == 0 or loop_length(m.theta, k, 3.0) <= 12.0]
    assert words == oracle
    assert len(words) == 23
    # closed under inversion
    assert all(ball.element(-k) is not None for k in words)


def test_lift_count_example():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 3))
    ball = build_pseudo_group(m, [10.0, 0.0, 0.0], 10.0)
    assert lift_count(ball, [10.0, 0.0, 0.0], 10.0) == 7


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 2 * math.pi - 0.1), st.floats(0.0, 8.0), st.integers(-6, 6))
def test_tau_matches_deck_conjugation(theta, t, k):
    m = FlatScrewQuotient(theta)
    x = np.array([t, 0.0, 0.0])
    ball = build_pseudo_group(m, x, 8.0)
    elem = ball.element(k)
    if elem is None:
        return
    W = _ball_sample(np.random.default_rng(abs(k)), 50, 8.0)
    got = tau_apply(ball, elem, W)
    oracle = np.array([screw_apply(theta, k, x + w) - x for w in W])
    np.testing.assert_allclose(got, oracle, atol=1e-10)


def test_tau_is_isometry_on_flat_quotient():
    m = FlatScrewQuotient(1.1)
    x = np.array([2.0, 1.0, 0.0])
    ball = build_pseudo_group(m, x, 6.0)
    rng = np.random.default_rng(3)
    A, B = _ball_sample(rng, 1000, 6.0), _ball_sample(rng, 1000, 6.0)
    for e in ball.elements:
        d0 = np.linalg.norm(A - B, axis=1)
        d1 = np.linalg.norm(tau_apply(ball, e, A) - tau_apply(ball, e, B), axis=1)
        np.testing.assert_allclose(d1, d0, atol=1e-6)


def test_tau_isometry_on_taub_nut(tn_ball):
    rng = np.random.default_rng(4)
    g = tn_ball.metric0
    E = np.linalg.inv(np.linalg.cholesky(g)).T
    A = _ball_sample(rng, 20, 2.0, 4) @ E.T
    B = A + _ball_sample(rng, 20, 0.01, 4) @ E.T
    e = tn_ball.fundamental()
    # the lifted metric at the image agrees with g_x to first order, so compare small pairs
    d0 = tn_ball.norm(A - B)
    d1 = tn_ball.norm(tau_apply(tn_ball, e, A) - tau_apply(tn_ball, e, B))
    np.testing.assert_allclose(d1, d0, rtol=2e-3)


def test_fixed_point_freeness():
    m = FlatScrewQuotient(0.9)
    x = np.array([4.0, 0.0, 0.0])
    ball = build_pseudo_group(m, x, 7.0)
    W = _ball_sample(np.random.default_rng(5), 1000, 7.0)
    # inj varies with the distance to the axis, so the bound is taken at the image point
    inj_at = np.array([flat_inj(m.theta, float(np.hypot(*(x + w)[:2]))) for w in W])
    for e in ball.nontrivial:
        assert np.all(min_displacement(ball, e, W) >= 2 * inj_at * (1 - 1e-3))


def test_fundamental_domain_basic():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 3))
    ball = build_pseudo_group(m, [10.0, 0.0, 0.0], 10.0)
    assert fundamental_domain_test(ball, None, np.zeros(3))
    assert not fundamental_domain_test(ball, None, np.array([0.0, 0.0, 2.9]))
    assert fundamental_domain_test(ball, None, np.array([0.0, 0.0, 1.0]))
    assert not fundamental_domain_test(ball, None, np.array([11.0, 0.0, 0.0]))


def test_fundamental_domain_inside_slabs():
    m = FlatScrewQuotient(1.3)
    ball = build_pseudo_group(m, [3.0, 0.0, 0.0], 6.0)
    W = _ball_sample(np.random.default_rng(6), 2000, 6.0)
    for e in ball.nontrivial:
        sub = sub_pseudo_group(ball, e)
        inside = np.array([fundamental_domain_test(ball, sub, w) for w in W])
        assert inside.any()
        assert np.all(slab_bounds(ball, e, W[inside]))


def test_fundamental_domain_volume_identity():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 3))
    x = np.array([10.0, 0.0, 0.0])
    rho = 6.0
    ball = build_pseudo_group(m, x, 2 * rho)
    vol_f, err_f, _ = fundamental_domain_volume(ball, rho, samples=200_000, seed=1)
    vol_b = ball_volume(m, x, rho, samples=200_000, seed=2)
    assert vol_f == pytest.approx(vol_b.value, rel=0.02)
    assert err_f / vol_f <= 0.01


@pytest.mark.parametrize("seed", range(3))
def test_covering_volume_inequality(seed):
    rng = np.random.default_rng(seed)
    m = FlatScrewQuotient(float(rng.uniform(0.3, 6.0)))
    x = np.array([float(rng.uniform(0, 10)), 0.0, 0.0])
    lhs, rhs, err = covering_volume_check(m, x, float(rng.uniform(4, 10)), samples=50_000, seed=seed)
    assert lhs <= rhs + 3 * err


def test_flat_translation_defects_vanish():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 4))
    x = np.array([7.0, 0.0, 0.0])
    ball = build_pseudo_group(m, x, 9.0)
    W = _ball_sample(np.random.default_rng(7), 200, 4.0)
    e = ball.element(4)
    assert translation_defect(ball, e, W).max() <= 1e-8
    np.testing.assert_array_equal(loop_iterate_translation_defect(ball, 0, W), 0.0)
    assert loop_iterate_translation_defect(ball, 1, W).max() <= 1e-12


def test_translation_defect_domain_checked():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 4))
    ball = build_pseudo_group(m, [7.0, 0.0, 0.0], 9.0)
    with pytest.raises(LeftBall):
        translation_defect(ball, ball.element(4), np.array([0.0, 0.0, 6.0]))


def test_taub_nut_group_is_fiber_powers(tn_ball):
    fiber = float(TN.orbit_length(tn_ball.center))
    words = sorted(e.word_power for e in tn_ball.elements)
    n = int(10.0 // fiber)
    assert words == list(range(-n, n + 1))
    assert tn_ball.incomplete
    for e in tn_ball.nontrivial:
        assert float(tn_ball.norm(e.lift_vector)) == pytest.approx(abs(e.word_power) * fiber, rel=1e-3)


def test_taub_nut_translation_defect_bound(tn_ball):
    e = tn_ball.fundamental()
    v = float(tn_ball.norm(e.lift_vector))
    g = tn_ball.metric0
    E = np.linalg.inv(np.linalg.cholesky(g)).T
    W = _ball_sample(np.random.default_rng(8), 40, 10.0 - v, 4) @ E.T
    wn = tn_ball.norm(W)
    bound = tn_ball.curvature_bound * v * wn * (v + wn)
    assert np.all(translation_defect(tn_ball, e, W) <= bound + 1e-12)


def test_scale_too_large():
    with pytest.raises(ScaleTooLarge):
        build_pseudo_group(TN, [1.0, 0.5, 1.0, 0.0], 5.0)


def test_holonomy_defect_flat_and_curved():
    assert holonomy_defect(FlatScrewQuotient(ScrewAngle.rational(1, 2)), [10.0, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-12)
    a = holonomy_defect(TN, [12.0, 0.0, 16.0, 0.1])
    b = holonomy_defect(TN, [24.0, 0.0, 32.0, 0.1])
    assert 0 < b < a
    assert math.log(b / a) / math.log(2) == pytest.approx(-2, abs=0.3)


def test_taub_nut_loop_iterate_defect_uniform_in_r():
    rs, worst = [25.0, 50.0, 100.0], []
    for r in rs:
        x = np.array([0.6 * r, 0.0, 0.8 * r, 0.1])
        ball = build_pseudo_group(TN, x, 2.2 * float(TN.orbit_length(x)), check_scale=False)
        E = np.linalg.inv(np.linalg.cholesky(ball.metric0)).T
        W = _ball_sample(np.random.default_rng(9), 8, 1.0, 4) @ E.T
        worst.append(loop_iterate_translation_defect(ball, 2, W).max())
    assert max(worst) <= 0.05
    assert np.polyfit(np.log(rs), np.log(worst), 1)[0] <= 0.1
