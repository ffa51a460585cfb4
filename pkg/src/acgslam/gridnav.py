"""Occupancy-grid fusion of an optimised ACG and A* planning through unknown space."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from skimage.draw import disk, line

from .graph import AcgGraph
from .pgm import read_pgm, write_pgm

UNKNOWN, FREE, OCCUPIED = 0, 1, 2
PGM_VALUES = {OCCUPIED: 0, FREE: 255, UNKNOWN: 128}
UNKNOWN_COST = 1.5
DEFAULT_RESOLUTION = 0.1
FALLBACK_FREE_RADIUS = 1.0
GAUSSIAN_HALF_LENGTH = 2.0  # cell Gaussians are drawn as +-2 sigma segments along the main axis

_MOVES = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]


@dataclass
class OccupancyGrid:
    """Row ``i`` covers y in [origin_y + i*res, origin_y + (i+1)*res)."""

    resolution: float
    origin: np.ndarray
    cells: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(self.origin, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def cell_of(self, p) -> tuple[int, int]:
        q = np.floor((np.asarray(p, dtype=float) - self.origin) / self.resolution).astype(int)
        return int(q[1]), int(q[0])

    def center_of(self, cell) -> np.ndarray:
        i, j = cell
        return self.origin + (np.array([j, i], dtype=float) + 0.5) * self.resolution

    def inside(self, cell) -> bool:
        return 0 <= cell[0] < self.shape[0] and 0 <= cell[1] < self.shape[1]

    def state(self, p) -> int:
        c = self.cell_of(p)
        return int(self.cells[c]) if self.inside(c) else UNKNOWN

    def to_image(self) -> np.ndarray:
        lut = np.zeros(3, dtype=np.uint8)
        for k, v in PGM_VALUES.items():
            lut[k] = v
        return lut[self.cells][::-1]  # image rows run north to south


# -- rasterisation -------------------------------------------------------------


def _cells_of(points, origin, res) -> np.ndarray:
    q = np.floor((np.asarray(points, dtype=float).reshape(-1, 2) - origin) / res).astype(np.int64)
    return q[:, ::-1]


def _draw_segments(mask: np.ndarray, a_cells: np.ndarray, b_cells: np.ndarray) -> None:
    h, w = mask.shape
    for (r0, c0), (r1, c1) in zip(a_cells, b_cells):
        rr, cc = line(int(r0), int(c0), int(r1), int(c1))
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        mask[rr[ok], cc[ok]] = True


def _extent(graph: AcgGraph) -> Optional[np.ndarray]:
    pts = [np.asarray(p, dtype=float) for p in graph.priors.values()]
    pts += [p.translation for p in graph.poses.values()]
    for pid, pm in graph.partial_maps.items():
        if pid in graph.poses and pm.grid is not None and len(pm.grid.cells):
            moved = graph.poses[pid].compose(pm.anchor.inverse())
            pts += list(moved.transform_point(np.array([c.mean for c in pm.grid.cells.values()])))
    if not pts:
        return None
    pts = np.array(pts).reshape(-1, 2)
    return np.array([pts.min(axis=0), pts.max(axis=0)])


def fuse(graph: AcgGraph, resolution: float = DEFAULT_RESOLUTION, margin: float = 1.0,
         bounds=None) -> OccupancyGrid:
    """Rasterise partial NDT maps at their optimised poses and the prior walls into one grid.

    Precedence: NDT-occupied and prior-occupied over NDT-free over unknown.
    ``bounds`` is ``((xmin, ymin), (xmax, ymax))``; the default covers the graph plus ``margin``.
    """
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if bounds is None:
        ext = _extent(graph)
        if ext is None:
            ext = np.zeros((2, 2))
        lo, hi = ext[0] - margin, ext[1] + margin
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    lo = np.floor(lo / resolution) * resolution
    w, h = (int(max(1, math.ceil(v))) for v in np.round((hi - lo) / resolution, 9))
    ndt_occ = np.zeros((h, w), bool)
    ndt_free = np.zeros((h, w), bool)
    prior_occ = np.zeros((h, w), bool)
    carving = set()

    for pid in sorted(graph.poses):
        pm = graph.partial_maps.get(pid)
        pose = graph.poses[pid]
        if pm is not None and pm.scan is not None and len(pm.scan):
            ends = pose.transform_point(np.asarray(pm.scan, dtype=float))
            # stop one cell short so the hit cell itself is not carved
            d = ends - pose.translation
            n = np.linalg.norm(d, axis=1, keepdims=True)
            short = pose.translation + d * np.clip(1.0 - resolution / np.maximum(n, 1e-12), 0.0, 1.0)
            start = _cells_of(pose.translation, lo, resolution)
            _draw_segments(ndt_free, np.repeat(start, len(short), axis=0), _cells_of(short, lo, resolution))
            carving.add("rays")
        else:
            r0, c0 = _cells_of(pose.translation, lo, resolution)[0]
            rr, cc = disk((r0, c0), FALLBACK_FREE_RADIUS / resolution, shape=(h, w))
            ndt_free[rr, cc] = True
            carving.add("disk")
        if pm is not None and pm.grid is not None and len(pm.grid.cells):
            moved = pose.compose(pm.anchor.inverse())
            keys = sorted(pm.grid.cells)
            means = np.array([pm.grid.cells[k].mean for k in keys])
            half = []
            for k in keys:
                ev, evec = np.linalg.eigh(pm.grid.cells[k].cov)
                half.append(GAUSSIAN_HALF_LENGTH * math.sqrt(max(ev[-1], 0.0)) * evec[:, -1])
            half = np.array(half)
            a = moved.transform_point(means - half)
            b = moved.transform_point(means + half)
            _draw_segments(ndt_occ, _cells_of(a, lo, resolution), _cells_of(b, lo, resolution))

    if graph.prior_edges:
        a = np.array([graph.priors[e.a] for e in graph.prior_edges])
        b = np.array([graph.priors[e.b] for e in graph.prior_edges])
        _draw_segments(prior_occ, _cells_of(a, lo, resolution), _cells_of(b, lo, resolution))

    cells = np.full((h, w), UNKNOWN, np.uint8)
    cells[ndt_free] = FREE
    cells[prior_occ | ndt_occ] = OCCUPIED
    meta = {"free_space": sorted(carving) or ["none"]}
    if "disk" in carving:
        meta["fallback_radius"] = FALLBACK_FREE_RADIUS
    return OccupancyGrid(float(resolution), lo, cells, meta)


# -- planning ----------------------------------------------------------------


def step_cost(grid: OccupancyGrid, a, b) -> float:
    """Cost of one 8-connected move from cell ``a`` into cell ``b``."""
    length = math.sqrt(2.0) if a[0] != b[0] and a[1] != b[1] else 1.0
    factor = UNKNOWN_COST if grid.cells[b] == UNKNOWN else 1.0
    return length * grid.resolution * factor


def neighbours(occ: np.ndarray, cell):
    """Traversable 8-neighbours in an occupancy mask; a diagonal move needs both side cells clear."""
    i, j = cell
    h, w = occ.shape
    for di, dj in _MOVES:
        ni, nj = i + di, j + dj
        if not (0 <= ni < h and 0 <= nj < w) or occ[ni, nj]:
            continue
        if di and dj and (occ[i + di, j] or occ[i, j + dj]):
            continue
        yield ni, nj


def _octile(a, b, res: float) -> float:
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return res * (max(dx, dy) + (math.sqrt(2.0) - 1.0) * min(dx, dy))


def plan_cells(grid: OccupancyGrid, start_cell, goal_cell):
    """A* over cells; returns (cells, cost) or ``None``."""
    if start_cell == goal_cell:
        return [start_cell], 0.0
    res = grid.resolution
    best = {start_cell: 0.0}
    parent = {start_cell: None}
    heap = [(_octile(start_cell, goal_cell, res), 0.0, start_cell)]
    closed = set()
    occ = grid.cells == OCCUPIED
    while heap:
        _, g, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal_cell:
            out = []
            while cur is not None:
                out.append(cur)
                cur = parent[cur]
            return out[::-1], g
        closed.add(cur)
        for nb in neighbours(occ, cur):
            ng = g + step_cost(grid, cur, nb)
            if ng < best.get(nb, math.inf) - 1e-12:
                best[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + _octile(nb, goal_cell, res), ng, nb))
    return None


def plan(grid: OccupancyGrid, start, goal) -> Optional[np.ndarray]:
    """Cheapest 8-connected path from ``start`` to ``goal``; ``None`` when there is none.

    Unknown cells are traversable at a higher cost. The returned polyline
    begins at ``start``, ends at ``goal`` and visits cell centres in between.
    """
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    sc, gc = grid.cell_of(start), grid.cell_of(goal)
    if not grid.inside(sc):
        raise ValueError(f"start {start.tolist()} lies outside the grid")
    if grid.cells[sc] == OCCUPIED:
        raise ValueError(f"start {start.tolist()} lies in an occupied cell")
    if not grid.inside(gc) or grid.cells[gc] == OCCUPIED:
        return None
    found = plan_cells(grid, sc, gc)
    if found is None:
        return None
    cells, _ = found
    if len(cells) == 1:
        return start[None, :].copy()
    mids = [grid.center_of(c) for c in cells[1:-1]]
    return np.vstack([start, *mids, goal]) if mids else np.vstack([start, goal])


def path_length(path) -> float:
    if path is None or len(path) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(np.asarray(path), axis=0), axis=1)))


# -- export ----------------------------------------------------------------


def write_grid(grid: OccupancyGrid, path) -> Path:
    """PGM (0 occupied, 255 free, 128 unknown) plus a JSON sidecar; returns the sidecar path."""
    path = Path(path)
    write_pgm(path, grid.to_image())
    side = path.with_suffix(".json")
    h, w = grid.shape
    doc = {"resolution": grid.resolution, "origin": [float(v) for v in grid.origin], "width": w, "height": h}
    doc.update(grid.metadata)
    side.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return side


def read_grid(path) -> OccupancyGrid:
    path = Path(path)
    doc = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    img = read_pgm(path)[::-1]
    cells = np.full(img.shape, UNKNOWN, np.uint8)
    cells[img == PGM_VALUES[FREE]] = FREE
    cells[img == PGM_VALUES[OCCUPIED]] = OCCUPIED
    meta = {k: v for k, v in doc.items() if k not in ("resolution", "origin", "width", "height")}
    return OccupancyGrid(float(doc["resolution"]), np.array(doc["origin"]), cells, meta)


def write_path(path_points, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for x, y in np.asarray(path_points).reshape(-1, 2):
            f.write(f"{x:.6f} {y:.6f}\n")
