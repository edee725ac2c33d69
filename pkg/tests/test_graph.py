import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clcrn import geometry as geo
from clcrn.errors import DegenerateMap, DuplicatePoints, EmptyNeighborhood, TooFewNodes
from clcrn.graph import (angle_scales, distance_scale, graph_stats, inverse_softplus, knn_graph,
                         neighborhood_geometry, pack_geometry, repack, softplus, unpack_geometry)
from clcrn.data import fibonacci_sphere


def brute_knn(points, k):
    """O(N^2) oracle with the same tie rule: distance, then index."""
    n = len(points)
    out = []
    for i in range(n):
        ds = []
        for j in range(n):
            if j != i:
                d = math.acos(max(-1.0, min(1.0, float(points[i] @ points[j]))))
                ds.append((round(d, 9), j))
        ds.sort()
        out.append({i} | {j for _, j in ds[:k]})
    return out


def test_equator_tie_broken_by_index():
    pts = geo.latlon_to_xyz(np.zeros(3), np.array([0.0, 2 * math.pi / 3, -2 * math.pi / 3]))
    g = knn_graph(pts, 1)
    assert [set(r) for r in g.neighbors] == [{0, 1}, {1, 0}, {2, 0}]
    assert all(g.neighbors[i, 0] == i for i in range(3))


def test_complete_graph():
    pts = fibonacci_sphere(10)
    g = knn_graph(pts, 9)
    assert all(set(r) == set(range(10)) for r in g.neighbors)


def test_square_never_picks_antipode():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
    g = knn_graph(pts, 2)
    assert set(g.neighbors[0]) == {0, 2, 3}
    assert set(g.neighbors[2]) == {2, 0, 1}


def test_knn_errors():
    with pytest.raises(TooFewNodes):
        knn_graph(fibonacci_sphere(3), 3)
    pts = fibonacci_sphere(5)
    pts[4] = pts[1]
    with pytest.raises(DuplicatePoints):
        knn_graph(pts, 2)


def test_knn_matches_brute_force_with_rounded_ties():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(5, 40))
        k = int(rng.integers(1, n))
        pts = geo.random_points(rng, n)
        g = knn_graph(pts, k)
        assert [set(r) for r in g.neighbors] == brute_knn(pts, k)


def test_knn_sets_respect_distance_order():
    pts = fibonacci_sphere(60)
    g = knn_graph(pts, 6)
    d = geo.geodesic_distance_batch(pts[:, None], pts[None])
    for i in range(60):
        inside = g.neighbors[i, 1:]
        outside = np.setdiff1d(np.arange(60), g.neighbors[i])
        assert d[i, inside].max() <= d[i, outside].min() + 1e-12


def test_angle_scale_examples():
    np.testing.assert_array_equal(angle_scales([0.0, math.pi]), [0.5, 0.5])
    np.testing.assert_array_equal(angle_scales([1.234]), [1.0])
    np.testing.assert_allclose(angle_scales([0.0, math.pi / 2, math.pi]), [3 / 8, 1 / 4, 3 / 8], atol=1e-15)
    with pytest.raises(EmptyNeighborhood):
        angle_scales([])


def test_angle_scales_handle_coincident_directions():
    s = angle_scales([0.5, 0.5, 2.0])
    assert np.all(s > 0)
    assert s.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=300)
@given(st.lists(st.floats(0, 2 * math.pi, exclude_max=True), min_size=1, max_size=16))
def test_angle_scales_partition(varphis):
    s = angle_scales(varphis)
    assert np.all(s > 0)
    assert abs(s.sum() - 1.0) <= 1e-9


def test_distance_scale():
    tau_raw = 0.3
    tau = softplus(tau_raw) + 1e-6
    assert distance_scale(0.0, tau_raw) == 1.0
    assert distance_scale(math.sqrt(tau), tau_raw) == pytest.approx(math.exp(-1), abs=1e-12)
    vals = distance_scale(np.linspace(0, 5, 50), tau_raw)
    assert np.all(np.diff(vals) < 0) and vals[-1] < 1e-10
    assert softplus(inverse_softplus(0.05)) == pytest.approx(0.05, rel=1e-12)


def test_single_neighbour_geometry():
    pts = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    nh = neighborhood_geometry(knn_graph(pts, 1))[0]
    self_rec, rec = nh.records
    assert self_rec.index == 0 and self_rec.polar.rho == 0 and self_rec.angle_scale == 1
    assert rec.local.phi_rel == pytest.approx(math.pi / 2, abs=1e-12)
    assert rec.local.z_rel == pytest.approx(0.0, abs=1e-12)
    assert rec.polar.varphi == pytest.approx(0.0, abs=1e-12)
    assert rec.polar.rho == pytest.approx(math.pi / 2)
    assert rec.angle_scale == 1.0


@pytest.mark.parametrize("map_kind", ["horizon", "log", "fast"])
def test_packed_geometry_invariants(map_kind):
    pts = fibonacci_sphere(80)
    g = knn_graph(pts, 8)
    p = pack_geometry(g, map_kind)
    assert p.neighbors.shape == (80, 9)
    np.testing.assert_allclose(p.angle_scale[:, 1:].sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p.angle_scale > 0)
    assert np.all(p.rho[:, 0] == 0) and np.all(p.angle_scale[:, 0] == 1)
    if map_kind != "fast":
        d = geo.geodesic_distance_batch(pts[:, None], pts[g.neighbors])
        np.testing.assert_allclose(p.rho, d, atol=1e-9)


def test_pole_center_uses_pole_rule():
    pts = np.vstack([[0, 0, 1.0], geo.latlon_to_xyz(np.full(4, 1.0), np.arange(4) * math.pi / 2)])
    p = pack_geometry(knn_graph(pts, 4), "horizon")
    np.testing.assert_allclose(p.coords[0, 1:, 0], 0.0)
    np.testing.assert_allclose(p.coords[0, 1:, 1], -(math.pi / 2 - 1.0), atol=1e-12)


def test_antipodal_neighbour_raises():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    with pytest.raises(DegenerateMap):
        pack_geometry(knn_graph(pts, 1), "horizon")


def test_unpack_repack_round_trip():
    p = pack_geometry(knn_graph(fibonacci_sphere(30), 5))
    q = repack(unpack_geometry(p))
    for name in ("neighbors", "coords", "rho", "varphi", "angle_scale", "centers"):
        np.testing.assert_array_equal(getattr(p, name), getattr(q, name))


def test_graph_stats():
    pts = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
    s = graph_stats(knn_graph(pts, 2))
    assert s["degree"] == 3
    assert s["min_distance"] == pytest.approx(math.pi / 2)
    assert s["max_distance"] == pytest.approx(math.pi / 2)
