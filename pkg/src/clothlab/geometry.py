"""Polygon utilities on projected cloth: rasterized contour extraction,
Douglas-Peucker simplification, max-min-distance vertex selection, and
shoelace area / centroid."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np

from .cloth import ClothState, MeshTopology

EXHAUSTIVE_COMBINATION_LIMIT = 50_000


class GeometryError(Exception):
    pass


class EmptyRegionError(GeometryError):
    """The projected cloth covers no raster cells."""


class InsufficientPointsError(GeometryError):
    """The contour has fewer points than requested; retry with a smaller epsilon."""


class DegeneratePolygonError(GeometryError):
    """Zero-area polygon has no well-defined centroid."""


@dataclass(frozen=True)
class Contour:
    points: np.ndarray  # (P, 2)
    closed: bool = True

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if self.closed and len(pts) < 3:
            raise GeometryError("closed contour needs at least 3 points")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def _mesh_triangles(topo: MeshTopology) -> np.ndarray:
    n = topo.n
    tris = []
    for r in range(n - 1):
        for c in range(n - 1):
            i = r * n + c
            tris.append((i, i + 1, i + n))
            tris.append((i + 1, i + n + 1, i + n))
    return np.asarray(tris, dtype=np.int64)


def _rasterize(state: ClothState, topo: MeshTopology, cell_size: float):
    """Mark grid cells whose centers are covered by any projected mesh triangle."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    pts = state.positions[:, :2]
    lo = pts.min(axis=0) - 2 * cell_size
    hi = pts.max(axis=0) + 2 * cell_size
    nx = max(1, int(np.ceil((hi[0] - lo[0]) / cell_size)))
    ny = max(1, int(np.ceil((hi[1] - lo[1]) / cell_size)))
    cx = lo[0] + (np.arange(nx) + 0.5) * cell_size
    cy = lo[1] + (np.arange(ny) + 0.5) * cell_size
    gx, gy = np.meshgrid(cx, cy)  # row index -> y, col index -> x
    centers = np.column_stack([gx.ravel(), gy.ravel()])
    covered = np.zeros(len(centers), dtype=bool)
    for ia, ib, ic in _mesh_triangles(topo):
        a, b, c = pts[ia], pts[ib], pts[ic]
        d1 = _cross2(centers - a, b - a)
        d2 = _cross2(centers - b, c - b)
        d3 = _cross2(centers - c, a - c)
        inside = ((d1 <= 0) & (d2 <= 0) & (d3 <= 0)) | ((d1 >= 0) & (d2 >= 0) & (d3 >= 0))
        covered |= inside
    mask = covered.reshape(ny, nx)
    return mask, lo


def _cross2(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return u[..., 0] * v[1] - u[..., 1] * v[0]


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 8-connected region of True cells."""
    ny, nx = mask.shape
    labels = -np.ones(mask.shape, dtype=np.int64)
    best_label, best_size, next_label = -1, 0, 0
    for sy, sx in zip(*np.nonzero(mask)):
        if labels[sy, sx] >= 0:
            continue
        size = 0
        queue = deque([(sy, sx)])
        labels[sy, sx] = next_label
        while queue:
            y, x = queue.popleft()
            size += 1
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < ny and 0 <= xx < nx and mask[yy, xx] and labels[yy, xx] < 0:
                        labels[yy, xx] = next_label
                        queue.append((yy, xx))
        if size > best_size:
            best_size, best_label = size, next_label
        next_label += 1
    if best_label < 0:
        raise EmptyRegionError("projected cloth covers no raster cells")
    return labels == best_label


# Moore neighborhood in clockwise order, starting from west (dy, dx).
_MOORE = [(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)]


def _moore_trace(region: np.ndarray) -> list[tuple[int, int]]:
    """Outer boundary of a connected region (Moore boundary tracing)."""
    ys, xs = np.nonzero(region)
    order = np.lexsort((xs, ys))  # topmost, then leftmost
    start = (int(ys[order[0]]), int(xs[order[0]]))
    boundary = [start]
    ny, nx = region.shape

    def filled(cell):
        y, x = cell
        return 0 <= y < ny and 0 <= x < nx and region[y, x]

    # Enter the start pixel coming from the west.
    backtrack_dir = 0
    current = start
    while True:
        found = False
        for k in range(8):
            d = (backtrack_dir + k) % 8
            cand = (current[0] + _MOORE[d][0], current[1] + _MOORE[d][1])
            if filled(cand):
                # Next backtrack direction: the neighbor just before `cand`.
                backtrack_dir = (d + 5) % 8
                current = cand
                found = True
                break
        if not found:
            break  # isolated pixel
        if current == start:
            break
        boundary.append(current)
    return boundary


def project_and_outline(state: ClothState, topo: MeshTopology, cell_size: float) -> Contour:
    """Project the mesh onto the table plane, rasterize, and trace the outer
    boundary of the largest covered region as a closed contour."""
    mask, lo = _rasterize(state, topo, cell_size)
    region = _largest_component(mask)
    cells = _moore_trace(region)
    pts = np.array(
        [[lo[0] + (x + 0.5) * cell_size, lo[1] + (y + 0.5) * cell_size] for y, x in cells]
    )
    # Drop consecutive duplicates (possible on single-cell necks).
    keep = [0]
    for i in range(1, len(pts)):
        if not np.allclose(pts[i], pts[keep[-1]]):
            keep.append(i)
    pts = pts[keep]
    if len(pts) < 3:
        raise EmptyRegionError("projected region degenerates to fewer than 3 boundary cells")
    return Contour(points=pts, closed=True)


def covered_area(state: ClothState, topo: MeshTopology, cell_size: float) -> float:
    """Projected area (m^2) of the largest covered region."""
    mask, _ = _rasterize(state, topo, cell_size)
    region = _largest_component(mask)
    return float(region.sum()) * cell_size * cell_size


def _segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-30:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _dp_chain(points: np.ndarray, eps: float) -> list[int]:
    """Indices kept by Douglas-Peucker on an open chain (includes endpoints)."""
    if len(points) <= 2:
        return list(range(len(points)))
    dists = _segment_distances(points[1:-1], points[0], points[-1])
    imax = int(np.argmax(dists)) + 1
    if dists[imax - 1] > eps:
        left = _dp_chain(points[: imax + 1], eps)
        right = _dp_chain(points[imax:], eps)
        return left[:-1] + [i + imax for i in right]
    return [0, len(points) - 1]


def douglas_peucker(contour: Contour, eps: float) -> Contour:
    """Simplify; every removed point lies within eps of the retained polyline."""
    if eps < 0:
        raise ValueError("epsilon must be >= 0")
    pts = contour.points
    if not contour.closed:
        keep = _dp_chain(pts, eps)
        return Contour(points=pts[keep], closed=False)
    # Closed: anchor at point 0 and the point farthest from it, simplify halves.
    far = int(np.argmax(np.linalg.norm(pts - pts[0], axis=1)))
    if far == 0:
        return contour
    first = _dp_chain(pts[: far + 1], eps)
    wrapped = np.vstack([pts[far:], pts[:1]])
    second = _dp_chain(wrapped, eps)
    keep = first[:-1] + [far + i for i in second[:-1]]
    if len(keep) < 3:
        keep = sorted(set(keep) | {0, far})
        if len(keep) < 3:
            mid = far // 2 if far >= 2 else min(far + 1, len(pts) - 1)
            keep = sorted(set(keep) | {mid})
    return Contour(points=pts[keep], closed=True)


def mmdvs(contour: Contour, k: int) -> np.ndarray:
    """The k contour points maximizing the minimum pairwise distance.

    Exhaustive when the combination count is small; otherwise a greedy
    farthest-point heuristic seeded by the diameter pair. Ties break
    lexicographically by index tuple.
    """
    pts = contour.points
    p = len(pts)
    if p < k:
        raise InsufficientPointsError(f"contour has {p} points, need {k}")
    if k == p:
        return pts.copy()
    dmat = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    if comb(p, k) <= EXHAUSTIVE_COMBINATION_LIMIT:
        best, best_d = None, -1.0
        for idx in combinations(range(p), k):
            sub = dmat[np.ix_(idx, idx)]
            dmin = float(sub[np.triu_indices(k, 1)].min()) if k > 1 else np.inf
            if dmin > best_d:
                best_d, best = dmin, idx
        return pts[list(best)]
    # Greedy: start from the (lexicographically first) diameter pair.
    flat = int(np.argmax(dmat))
    i0, j0 = divmod(flat, p)
    chosen = [min(i0, j0), max(i0, j0)]
    while len(chosen) < k:
        mind = dmat[:, chosen].min(axis=1)
        mind[chosen] = -1.0
        chosen.append(int(np.argmax(mind)))
    return pts[sorted(chosen)]


def polygon_area(contour: Contour) -> float:
    """Absolute shoelace area."""
    pts = contour.points
    if len(pts) < 3:
        raise GeometryError("area needs at least 3 points")
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def polygon_centroid(contour: Contour) -> np.ndarray:
    pts = contour.points
    if len(pts) < 3:
        raise GeometryError("centroid needs at least 3 points")
    x, y = pts[:, 0], pts[:, 1]
    cross = x * np.roll(y, -1) - np.roll(x, -1) * y
    area6 = 3.0 * float(np.sum(cross))
    if abs(area6) < 1e-18:
        raise DegeneratePolygonError("zero-area polygon")
    cx = float(np.sum((x + np.roll(x, -1)) * cross)) / area6
    cy = float(np.sum((y + np.roll(y, -1)) * cross)) / area6
    return np.array([cx, cy])
