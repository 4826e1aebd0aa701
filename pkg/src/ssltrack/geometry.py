"""Discrete unit-sphere grids and tangent-plane octagon point clouds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

MAX_LEVEL = 6

_PHI = (1.0 + np.sqrt(5.0)) / 2.0

_ICOSAHEDRON_VERTICES = np.array(
    [
        [-1.0, _PHI, 0.0],
        [1.0, _PHI, 0.0],
        [-1.0, -_PHI, 0.0],
        [1.0, -_PHI, 0.0],
        [0.0, -1.0, _PHI],
        [0.0, 1.0, _PHI],
        [0.0, -1.0, -_PHI],
        [0.0, 1.0, -_PHI],
        [_PHI, 0.0, -1.0],
        [_PHI, 0.0, 1.0],
        [-_PHI, 0.0, -1.0],
        [-_PHI, 0.0, 1.0],
    ]
)

_ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


@dataclass(frozen=True)
class ScanGrid:
    """Icosahedral unit-sphere grid refined ``level`` times.

    ``points`` has shape (K, 3) with K = 10 * 4**level + 2. The first
    points of a level-L grid are exactly the points of the level-(L-1) grid.
    """

    level: int
    points: np.ndarray
    triangles: np.ndarray
    nearest_gap: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class OctagonCloud:
    center: np.ndarray
    depth: int
    points: np.ndarray

    @property
    def count(self) -> int:
        return len(self.points)


def grid_size(level: int) -> int:
    return 10 * 4**level + 2


def _subdivide(points: list, triangles: np.ndarray) -> np.ndarray:
    midpoint: dict[tuple[int, int], int] = {}

    def mid(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        idx = midpoint.get(key)
        if idx is None:
            m = points[a] + points[b]
            points.append(m / np.linalg.norm(m))
            idx = len(points) - 1
            midpoint[key] = idx
        return idx

    out = np.empty((4 * len(triangles), 3), dtype=np.int64)
    for t, (a, b, c) in enumerate(triangles):
        ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
        out[4 * t : 4 * t + 4] = [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return out


def build_sphere_grid(level: int) -> ScanGrid:
    """Build the icosahedral grid refined ``level`` times.

    Each refinement splits every triangle into four using edge midpoints
    projected back onto the sphere; shared edges yield a single vertex.
    """
    if not isinstance(level, (int, np.integer)) or not 0 <= level <= MAX_LEVEL:
        raise ValueError(f"grid level must be an integer in [0, {MAX_LEVEL}], got {level!r}")
    base = _ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES, axis=1, keepdims=True)
    points = list(base)
    triangles = _ICOSAHEDRON_FACES.copy()
    for _ in range(int(level)):
        triangles = _subdivide(points, triangles)
    pts = np.asarray(points, dtype=np.float64)
    # renormalize once more so every point is unit norm to rounding
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts.setflags(write=False)
    triangles.setflags(write=False)
    dist, _ = cKDTree(pts).query(pts, k=2)
    gap = np.ascontiguousarray(dist[:, 1])
    gap.setflags(write=False)
    return ScanGrid(level=int(level), points=pts, triangles=triangles, nearest_gap=gap)


def nearest_neighbor_gap(grid: ScanGrid, index: int) -> float:
    """Chord distance from point ``index`` to its closest other grid point."""
    if not 0 <= index < len(grid.points):
        raise ValueError(f"point index {index} out of range for grid of {len(grid.points)} points")
    return float(grid.nearest_gap[index])


def tangent_basis(center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal pair spanning the tangent plane at ``center``.

    The first axis is ``center`` crossed with the canonical axis it is least
    aligned with.
    """
    c = np.asarray(center, dtype=np.float64)
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(c)))] = 1.0
    e1 = np.cross(c, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(c, e1)
    return e1, e2


def octagon_count(depth: int) -> int:
    return 4 * (2**depth + 4**depth) + 1


def _octagon_offsets(depth: int) -> np.ndarray:
    # ring j (1..2^depth) is an octagon at j/2^depth of the outer radius,
    # each edge split into j segments -> 8j points
    rings = 2**depth
    corners = np.stack(
        [np.cos(np.arange(9) * np.pi / 4.0), np.sin(np.arange(9) * np.pi / 4.0)], axis=1
    )
    offsets = [np.zeros((1, 2))]
    for j in range(1, rings + 1):
        frac = np.arange(j) / j
        ring = []
        for e in range(8):
            a, b = corners[e], corners[e + 1]
            ring.append(a[None, :] + frac[:, None] * (b - a)[None, :])
        offsets.append(np.concatenate(ring) * (j / rings))
    return np.concatenate(offsets)


def build_octagon(center, radius: float, depth: int) -> OctagonCloud:
    """Octagonal point cloud around ``center`` re-projected on the sphere.

    ``radius`` is the chord distance from the center to the outer octagon
    vertices after projection.
    """
    c = np.asarray(center, dtype=np.float64)
    if c.shape != (3,) or abs(np.linalg.norm(c) - 1.0) > 1e-6:
        raise ValueError("octagon center must be a unit 3-vector")
    if not 0.0 < radius < 2.0:
        raise ValueError(f"octagon radius must lie in (0, 2), got {radius}")
    if depth < 0:
        raise ValueError("octagon depth must be non-negative")
    # tangent offset whose projection lands at the requested chord distance
    angle = 2.0 * np.arcsin(radius / 2.0)
    scale = np.tan(angle) if angle < np.pi / 2 else 1e6
    e1, e2 = tangent_basis(c)
    off = _octagon_offsets(depth) * scale
    pts = c[None, :] + off[:, :1] * e1[None, :] + off[:, 1:] * e2[None, :]
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts[0] = c
    return OctagonCloud(center=c, depth=depth, points=pts)


def octagon_offsets_batch(centers: np.ndarray, radii: np.ndarray, depth: int) -> np.ndarray:
    """Octagon clouds for many centers at once, shape (K, E, 3)."""
    centers = np.asarray(centers, dtype=np.float64)
    angle = 2.0 * np.arcsin(np.clip(radii, 0.0, 2.0) / 2.0)
    scale = np.tan(np.minimum(angle, np.pi / 2 - 1e-9))
    off = _octagon_offsets(depth)
    out = np.empty((len(centers), len(off), 3))
    for k, c in enumerate(centers):
        e1, e2 = tangent_basis(c)
        out[k] = c + scale[k] * (off[:, :1] * e1 + off[:, 1:] * e2)
    out /= np.linalg.norm(out, axis=2, keepdims=True)
    out[:, 0] = centers
    return out
