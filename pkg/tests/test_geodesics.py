import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collapse_lab.errors import LeftChartDomain
from collapse_lab.geodesics import (
    distance_hessian_defect,
    exp_map,
    geodesic_loops,
    log_map,
    orthonormal_frame,
    parallel_transport,
    shortest_loop,
    transport_along_geodesic,
)
from collapse_lab.models import Euclidean, FlatScrewQuotient, ScrewAngle, TaubNut, loop_length

TN = TaubNut()
BASE = np.array([6.0, 2.0, 5.0, 0.4])


def test_euclidean_exp_is_translation():
    e = Euclidean(3)
    np.testing.assert_array_equal(exp_map(e, [1.0, 2.0, 3.0], [0.5, -1.0, 2.0]), [1.5, 1.0, 5.0])
    np.testing.assert_array_equal(exp_map(e, [1.0, 2.0, 3.0], [0.0, 0.0, 0.0]), [1.0, 2.0, 3.0])


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=4, max_size=4))
def test_exp_log_round_trip(v):
    v = np.array(v)
    y = exp_map(TN, BASE, v)
    back = log_map(TN, BASE, y, v0=np.zeros(4), tol=1e-12)
    np.testing.assert_allclose(back, v, atol=1e-7)


def test_geodesic_reversibility():
    v = np.array([0.8, -0.4, 0.3, 1.1])
    end, path = exp_map(TN, BASE, v, path=True)
    back = exp_map(TN, end, -path.velocities[-1])
    np.testing.assert_allclose(back, BASE, atol=1e-8)


def test_energy_conserved_along_path():
    v = np.array([1.0, 0.5, -0.7, 0.9])
    _, path = exp_map(TN, BASE, v, path=True)
    G = TN.metric(path.points)
    energy = np.einsum("ni,nij,nj->n", path.velocities, G, path.velocities)
    assert np.ptp(energy) <= 1e-8 * energy[0]
    assert path.length == pytest.approx(math.sqrt(energy[0]), rel=1e-12)


def test_transport_preserves_inner_products():
    g0 = TN.metric(BASE[None])[0]
    E = orthonormal_frame(g0)
    v = np.array([0.6, 1.2, -0.4, 0.8])
    end, _, T = transport_along_geodesic(TN, BASE, v, E.T)
    g1 = TN.metric(end[None])[0]
    np.testing.assert_allclose(T @ g1 @ T.T, np.eye(4), atol=1e-8)


def test_parallel_transport_on_sampled_curve_matches_geodesic_route():
    v = np.array([0.6, 1.2, -0.4, 0.8])
    w = np.array([0.2, -0.1, 0.3, 0.5])
    _, path = exp_map(TN, BASE, v, path=True, n_samples=129)
    a = parallel_transport(TN, path, w)
    b = parallel_transport(TN, path.points, w)
    np.testing.assert_allclose(b, a, atol=1e-5)


def test_leaving_chart_domain_raises():
    with pytest.raises(LeftChartDomain):
        exp_map(TN, [0.5, 0.0, 0.5, 0.0], [-3.0, 0.0, -3.0, 0.0])


def test_flat_loops_rational_example():
    m = FlatScrewQuotient(ScrewAngle.rational(1, 3))
    loops = geodesic_loops(m, [10.0, 0.0, 0.0], 10.0)
    assert sorted(rec.word for rec in loops) == [-9, -6, -3, 3, 6, 9]
    for rec in loops:
        assert rec.length == pytest.approx(abs(rec.word), abs=1e-12)
    assert not loops.incomplete


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 2 * math.pi - 0.05), st.floats(0, 20), st.floats(1, 15))
def test_flat_loop_lengths_match_closed_form(theta, t, L):
    m = FlatScrewQuotient(theta)
    for rec in geodesic_loops(m, [t, 0.0, 0.0], L):
        assert rec.length == pytest.approx(loop_length(theta, rec.word, t), rel=1e-12)
        assert rec.length <= L
        np.testing.assert_allclose(rec.holonomy @ rec.holonomy.T, np.eye(3), atol=1e-12)


def test_flat_shooting_matches_exact():
    m = FlatScrewQuotient(1.3)
    x = [4.0, 1.0, 0.2]
    a = geodesic_loops(m, x, 9.0, strategy="exact")
    b = geodesic_loops(m, x, 9.0, strategy="shooting")
    assert [r.word for r in a] == [r.word for r in b]
    np.testing.assert_allclose([r.length for r in a], [r.length for r in b], rtol=1e-12)


def test_taub_nut_shortest_loop_is_orbit():
    x = np.array([12.0, 0.0, 16.0, 0.3])
    rec = shortest_loop(TN, x)
    assert rec.length == pytest.approx(float(TN.orbit_length(x)), rel=1e-4)
    assert abs(rec.word) == 1
    np.testing.assert_allclose(rec.holonomy @ rec.holonomy.T, np.eye(4), atol=1e-7)


def test_distance_hessian_defect_small():
    assert distance_hessian_defect(Euclidean(3), [0.0, 0.0, 0.0], 0.5) <= 1e-6
    assert distance_hessian_defect(TN, [18.0, 6.0, 12.0, 0.5], 0.5, n_samples=2) <= 0.05
