"""Partial NDT grids built from 2D scans and corner extraction on top of them."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

MIN_POINTS = 3
MAX_CONDITION = 1e4
CORNER_ANGLE_RANGE = (80.0, 100.0)


@dataclass(frozen=True)
class NdtCell:
    mean: np.ndarray
    cov: np.ndarray
    point_count: int

    @property
    def main_axis(self) -> np.ndarray:
        return main_eigenvector(self.cov)


@dataclass
class NdtGrid:
    cell_size: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(2))
    cells: dict[tuple[int, int], NdtCell] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cells)

    def cell_index(self, p) -> tuple[int, int]:
        q = np.floor((np.asarray(p, dtype=float) - self.origin) / self.cell_size)
        return int(q[0]), int(q[1])


@dataclass(frozen=True)
class Corner:
    position: np.ndarray
    strength: float  # deviation of the ray angle from 90 degrees
    rays: tuple = ()  # ((point, direction), (point, direction)) that produced it


def main_eigenvector(cov: np.ndarray) -> np.ndarray:
    """Eigenvector of the larger eigenvalue, signed so x >= 0 (then y >= 0)."""
    w, v = np.linalg.eigh(cov)
    e = v[:, int(np.argmax(w))]
    if e[0] < 0 or (e[0] == 0 and e[1] < 0):
        e = -e
    return e


def regularize(cov: np.ndarray, cell_size: float) -> np.ndarray:
    eps = (0.01 * cell_size) ** 2
    cov = cov + eps * np.eye(2)
    w, v = np.linalg.eigh(cov)
    w = np.maximum(w, w.max() / MAX_CONDITION)
    out = v @ np.diag(w) @ v.T
    return 0.5 * (out + out.T)


def build_ndt_grid(points, cell_size: float, origin=(0.0, 0.0), min_points: int = MIN_POINTS) -> NdtGrid:
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    origin = np.asarray(origin, dtype=float)
    grid = NdtGrid(cell_size=float(cell_size), origin=origin)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return grid
    idx = np.floor((pts - origin) / cell_size).astype(np.int64)
    # lexsort keeps the grouping independent of the input order
    order = np.lexsort((pts[:, 1], pts[:, 0], idx[:, 1], idx[:, 0]))
    idx, pts = idx[order], pts[order]
    keys, starts, counts = np.unique(idx, axis=0, return_index=True, return_counts=True)
    for key, s, n in zip(keys, starts, counts):
        if n < min_points:
            continue
        cp = pts[s:s + n]
        mean = cp.mean(axis=0)
        cov = np.cov(cp, rowvar=False, ddof=1)
        grid.cells[(int(key[0]), int(key[1]))] = NdtCell(mean, regularize(cov, cell_size), int(n))
    return grid


def _intersect(p1, d1, p2, d2):
    # p1 + t d1 = p2 + u d2
    det = d1[0] * (-d2[1]) - d1[1] * (-d2[0])
    if abs(det) < 1e-12:
        return None
    r = p2 - p1
    t = (r[0] * (-d2[1]) - r[1] * (-d2[0])) / det
    return p1 + t * d1


def _candidates(grid: NdtGrid, neighborhood: int):
    lo, hi = CORNER_ANGLE_RANGE
    cos_lo = math.cos(math.radians(lo))
    keys = sorted(grid.cells)
    axes = {k: grid.cells[k].main_axis for k in keys}
    reach = (neighborhood + 0.5) * grid.cell_size
    seen = set()
    out = []
    offsets = [
        (di, dj)
        for di in range(-neighborhood, neighborhood + 1)
        for dj in range(-neighborhood, neighborhood + 1)
        if (di, dj) != (0, 0)
    ]
    for key in keys:
        nbrs = [(key[0] + di, key[1] + dj) for di, dj in offsets if (key[0] + di, key[1] + dj) in axes]
        if len(nbrs) < 2:
            continue
        center = grid.origin + (np.array(key) + 0.5) * grid.cell_size
        for a, b in itertools.combinations(nbrs, 2):
            pair = (a, b) if a < b else (b, a)
            da, db = axes[pair[0]], axes[pair[1]]
            c = abs(float(da @ db))
            # angle between undirected axes in [80, 100] <=> |cos| <= cos(80)
            if c > cos_lo:
                continue
            pa, pb = grid.cells[pair[0]].mean, grid.cells[pair[1]].mean
            x = _intersect(pa, da, pb, db)
            if x is None:
                continue
            # the collision point has to fall inside the examined neighbourhood
            if np.max(np.abs(x - center)) > reach:
                continue
            if pair in seen:
                continue
            seen.add(pair)
            angle = math.degrees(math.acos(min(1.0, float(da @ db))))
            out.append(Corner(x, abs(angle - 90.0), ((pa, da), (pb, db))))
    return out


def merge_corners(corners, radius: float):
    """Group corners closer than ``radius`` (single linkage).

    Each group reports the member nearest to the group centroid, so the
    reported position stays an actual ray intersection.
    """
    if not corners:
        return []
    corners = sorted(corners, key=lambda c: (c.position[0], c.position[1], c.strength))
    pos = np.array([c.position for c in corners])
    pairs = cKDTree(pos).query_pairs(radius, output_type="ndarray")
    n = len(corners)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else coo_matrix((n, n))
    ncomp, labels = connected_components(adj, directed=False)
    merged = []
    for lab in range(ncomp):
        members = np.flatnonzero(labels == lab)
        centroid = pos[members].mean(axis=0)
        d = np.linalg.norm(pos[members] - centroid, axis=1)
        best = corners[members[int(np.argmin(d))]]
        strength = float(np.mean([corners[m].strength for m in members]))
        merged.append(Corner(best.position, strength, best.rays))
    merged.sort(key=lambda c: (c.position[0], c.position[1]))
    return merged


def detect_corners(grid: NdtGrid, neighborhood: int = 2, merge_radius: float | None = None):
    if neighborhood < 1:
        raise ValueError("neighborhood must be >= 1")
    if merge_radius is None:
        merge_radius = grid.cell_size
    return merge_corners(_candidates(grid, neighborhood), merge_radius)


def load_points(path) -> np.ndarray:
    """Read an ``x y`` per line point file (meters)."""
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected 'x y', got {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    return np.array(rows, dtype=float).reshape(-1, 2)
