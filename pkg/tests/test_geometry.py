"""Contour extraction, simplification, and vertex-selection oracles."""
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clothlab import cloth, geometry
from clothlab.cloth import MeshTopology, SimParams
from clothlab.geometry import Contour


def square_contour(side=1.0, pts_per_edge=5):
    s = np.linspace(0.0, side, pts_per_edge, endpoint=False)
    top = np.column_stack([s, np.zeros_like(s)])
    right = np.column_stack([np.full_like(s, side), s])
    bottom = np.column_stack([side - s, np.full_like(s, side)])
    left = np.column_stack([np.zeros_like(s), side - s])
    return Contour(points=np.vstack([top, right, bottom, left]), closed=True)


# ---------------------------------------------------------------------------
# Rasterization / contour


def test_covered_area_of_flat_cloth():
    topo = MeshTopology.grid(n=6, shear=True)
    params = SimParams()
    state = cloth.flat_state(topo, params)
    cell = topo.edge_length / 48
    area = geometry.covered_area(state, topo, cell)
    assert abs(area - topo.edge_length**2) / topo.edge_length**2 < 0.1


def test_project_and_outline_closed_square():
    topo = MeshTopology.grid(n=6, shear=True)
    params = SimParams()
    state = cloth.flat_state(topo, params)
    contour = geometry.project_and_outline(state, topo, topo.edge_length / 48)
    assert contour.closed
    assert len(contour) > 20
    span = contour.points.max(axis=0) - contour.points.min(axis=0)
    assert np.all(np.abs(span - topo.edge_length) < 0.03)


def test_largest_component_picks_biggest():
    mask = np.zeros((8, 8), dtype=bool)
    mask[0:2, 0:2] = True   # 4 cells
    mask[4:8, 4:8] = True   # 16 cells
    region = geometry._largest_component(mask)
    assert region.sum() == 16
    assert region[5, 5] and not region[0, 0]


def test_empty_region_raises():
    with pytest.raises(geometry.EmptyRegionError):
        geometry._largest_component(np.zeros((4, 4), dtype=bool))


# ---------------------------------------------------------------------------
# Douglas-Peucker


def _max_removed_distance(original: np.ndarray, kept: np.ndarray, closed: bool) -> float:
    """Largest distance from any original point to the retained polyline."""
    segs = list(zip(kept[:-1], kept[1:]))
    if closed and len(kept) > 1:
        segs.append((kept[-1], kept[0]))
    worst = 0.0
    for p in original:
        d = min(
            float(geometry._segment_distances(p[None, :], a, b)[0]) for a, b in segs
        )
        worst = max(worst, d)
    return worst


def test_dp_square_keeps_corners():
    c = square_contour(pts_per_edge=6)
    simplified = geometry.douglas_peucker(c, 0.01)
    assert len(simplified) <= 6
    # All four corners survive.
    for corner in ([0, 0], [1, 0], [1, 1], [0, 1]):
        d = np.linalg.norm(simplified.points - np.array(corner), axis=1).min()
        assert d < 1e-9


def test_dp_epsilon_zero_keeps_collinear_reduction_valid():
    pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10)])
    c = Contour(points=pts, closed=False)
    out = geometry.douglas_peucker(c, 0.0)
    assert _max_removed_distance(pts, out.points, closed=False) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    n=st.integers(5, 40),
    eps=st.floats(0.001, 0.5),
)
def test_dp_epsilon_bound_property(seed, n, eps):
    """Every removed point lies within eps of the simplified polyline."""
    rng = np.random.default_rng(seed)
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = rng.uniform(0.5, 1.5, size=n)
    pts = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
    closed = bool(seed % 2)
    if not closed:
        c = Contour(points=pts, closed=False)
    else:
        c = Contour(points=pts, closed=True)
    out = geometry.douglas_peucker(c, eps)
    assert _max_removed_distance(pts, out.points, closed) <= eps + 1e-9


# ---------------------------------------------------------------------------
# MMDVS


def brute_force_mmdvs(pts: np.ndarray, k: int) -> float:
    best = -1.0
    for idx in combinations(range(len(pts)), k):
        sub = pts[list(idx)]
        dmin = min(
            float(np.linalg.norm(sub[i] - sub[j]))
            for i in range(k)
            for j in range(i + 1, k)
        )
        best = max(best, dmin)
    return best


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), p=st.integers(4, 12), k=st.integers(2, 6))
def test_mmdvs_matches_brute_force(seed, p, k):
    if k > p:
        return
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(p, 2))
    c = Contour(points=pts, closed=p >= 3)
    chosen = geometry.mmdvs(c, k)
    dmin = min(
        float(np.linalg.norm(chosen[i] - chosen[j]))
        for i in range(k)
        for j in range(i + 1, k)
    )
    assert abs(dmin - brute_force_mmdvs(pts, k)) < 1e-12


def test_mmdvs_square_picks_corners():
    c = square_contour(pts_per_edge=4)
    chosen = geometry.mmdvs(c, 4)
    for corner in ([0, 0], [1, 0], [1, 1], [0, 1]):
        d = np.linalg.norm(chosen - np.array(corner), axis=1).min()
        assert d < 1e-12


def test_mmdvs_insufficient_points():
    c = Contour(points=np.eye(3)[:, :2], closed=True)
    with pytest.raises(geometry.InsufficientPointsError):
        geometry.mmdvs(c, 5)


def test_mmdvs_greedy_large_contour():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, size=(300, 2))
    chosen = geometry.mmdvs(Contour(points=pts, closed=True), 8)
    assert chosen.shape == (8, 2)
    dmin = min(
        float(np.linalg.norm(chosen[i] - chosen[j]))
        for i in range(8)
        for j in range(i + 1, 8)
    )
    assert dmin > 0


# ---------------------------------------------------------------------------
# Polygon measures


def test_polygon_area_and_centroid_square():
    c = square_contour(side=2.0)
    assert abs(geometry.polygon_area(c) - 4.0) < 1e-12
    assert np.allclose(geometry.polygon_centroid(c), [1.0, 1.0])


def test_polygon_area_triangle():
    c = Contour(points=np.array([[0, 0], [4, 0], [0, 3]]), closed=True)
    assert abs(geometry.polygon_area(c) - 6.0) < 1e-12
    assert np.allclose(geometry.polygon_centroid(c), [4 / 3, 1.0])


def test_degenerate_centroid_raises():
    c = Contour(points=np.array([[0, 0], [1, 1], [2, 2]]), closed=True)
    with pytest.raises(geometry.DegeneratePolygonError):
        geometry.polygon_centroid(c)
