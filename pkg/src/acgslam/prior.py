"""Emergency-map raster to corner/wall graph.

The raster is thresholded, thinned to a one pixel skeleton and traced by a
line follower. Nodes are emitted at junctions, free line ends and wherever
the traced direction turns by 45 degrees or more.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage.morphology import skeletonize

from .pgm import read_pgm

NBR8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]

TANGENT_WINDOW = 7
TURN_ANGLE = 45.0
NODE_MERGE_PX = 3.0
SPUR_PX = 6


@dataclass
class RasterMap:
    pixels: np.ndarray  # (height, width) uint8, row 0 at the top
    pixel_size: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError("raster must be a non-empty 2D array")
        if not self.pixel_size > 0:
            raise ValueError("pixel_size must be positive")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_pgm(cls, path, pixel_size: float = 1.0) -> "RasterMap":
        return cls(read_pgm(path), pixel_size)


@dataclass
class PriorGraph:
    nodes: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    edges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 2)
        self.edges = [(int(a), int(b)) for a, b in self.edges]

    @property
    def lengths(self) -> np.ndarray:
        if not self.edges:
            return np.zeros(0)
        e = np.array(self.edges)
        return np.linalg.norm(self.nodes[e[:, 1]] - self.nodes[e[:, 0]], axis=1)

    def validate(self) -> None:
        seen = set()
        n = len(self.nodes)
        for a, b in self.edges:
            if a == b:
                raise ValueError(f"self edge on node {a}")
            if not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"edge ({a}, {b}) references a missing node")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)


def threshold(raster: RasterMap, level: int = 128) -> RasterMap:
    """Pixels at or below ``level`` become wall (1), the rest free (0)."""
    return RasterMap((raster.pixels <= level).astype(np.uint8), raster.pixel_size)


# -- skeleton topology ------------------------------------------------------


def _neighbours(skel: np.ndarray, r: int, c: int):
    h, w = skel.shape
    for dr, dc in NBR8:
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w and skel[rr, cc]:
            yield rr, cc


def _groups(pixels: set) -> list[set]:
    """8-connected components of a pixel set."""
    left = set(pixels)
    out = []
    while left:
        seed = min(left)
        left.discard(seed)
        comp, stack = {seed}, [seed]
        while stack:
            r, c = stack.pop()
            for dr, dc in NBR8:
                q = (r + dr, c + dc)
                if q in left:
                    left.discard(q)
                    comp.add(q)
                    stack.append(q)
        out.append(comp)
    return out


class _Topology:
    """Nodes (junction clusters and end pixels) and the pixel paths between them."""

    def __init__(self, skel: np.ndarray):
        self.skel = skel
        pix = {(int(r), int(c)) for r, c in zip(*np.nonzero(skel))}
        self.pixels = pix
        self.node_pos: list[np.ndarray] = []
        self.pixel_node: dict[tuple[int, int], int] = {}
        candidates = {p for p in pix if sum(1 for _ in _neighbours(skel, *p)) >= 3}
        for cluster in _groups(candidates):
            exits = {q for p in cluster for q in _neighbours(skel, *p)} - cluster
            if len(_groups(exits)) >= 3:
                self._add_node(cluster)
        for p in sorted(pix):
            if p not in self.pixel_node and sum(1 for _ in _neighbours(skel, *p)) <= 1:
                self._add_node({p})
        self.paths: list[tuple[int, int, list]] = []  # (node_a, node_b or -1 for loops, pixels)
        self._trace()

    def _add_node(self, cluster) -> int:
        k = len(self.node_pos)
        self.node_pos.append(np.mean(np.array(sorted(cluster), dtype=float), axis=0))
        for p in cluster:
            self.pixel_node[p] = k
        return k

    def _walk(self, node: int, first, visited: set):
        path = [first]
        visited.add(first)
        prev = None
        cur = first
        while True:
            nbrs = list(_neighbours(self.skel, *cur))
            hit = [q for q in nbrs if q in self.pixel_node and (self.pixel_node[q] != node or len(path) > 2)]
            if hit:
                # prefer the 4-connected node pixel when two are adjacent
                hit.sort(key=lambda q: abs(q[0] - cur[0]) + abs(q[1] - cur[1]))
                return self.pixel_node[hit[0]], path
            nxt = [q for q in nbrs if q not in visited and q not in self.pixel_node]
            if not nxt:
                return None, path
            if len(nxt) > 1 and prev is not None:
                forward = [q for q in nxt if max(abs(q[0] - prev[0]), abs(q[1] - prev[1])) > 1]
                nxt = forward or nxt
            nxt.sort(key=lambda q: (abs(q[0] - cur[0]) + abs(q[1] - cur[1]), q))
            prev, cur = cur, nxt[0]
            visited.add(cur)
            path.append(cur)

    def _trace(self):
        visited: set = set()
        done_direct = set()
        for node in range(len(self.node_pos)):
            members = sorted(p for p, k in self.pixel_node.items() if k == node)
            for p in members:
                for q in _neighbours(self.skel, *p):
                    if q in self.pixel_node:
                        other = self.pixel_node[q]
                        if other != node:
                            key = (min(node, other), max(node, other))
                            if key not in done_direct:
                                done_direct.add(key)
                                self.paths.append((node, other, []))
                        continue
                    if q in visited:
                        continue
                    end, path = self._walk(node, q, visited)
                    if end is not None:
                        self.paths.append((node, end, path))
        # leftovers are closed loops without any junction or end
        rest = self.pixels - visited - set(self.pixel_node)
        while rest:
            start = min(rest)
            loop = [start]
            seen = {start}
            cur, prev = start, None
            while True:
                nxt = [q for q in _neighbours(self.skel, *cur) if q in rest and q not in seen]
                if not nxt:
                    break
                if len(nxt) > 1 and prev is not None:
                    fwd = [q for q in nxt if max(abs(q[0] - prev[0]), abs(q[1] - prev[1])) > 1]
                    nxt = fwd or nxt
                nxt.sort(key=lambda q: (abs(q[0] - cur[0]) + abs(q[1] - cur[1]), q))
                prev, cur = cur, nxt[0]
                seen.add(cur)
                loop.append(cur)
            rest -= seen
            visited |= seen
            if len(loop) >= 3:
                self.paths.append((-1, -1, loop))


# -- line following -----------------------------------------------------------


def _turn_angles(pts: np.ndarray, window: int, cyclic: bool) -> np.ndarray:
    n = len(pts)
    ang = np.zeros(n)
    half = (window + 1) // 2
    for i in range(n):
        if cyclic:
            back = min(window, n // 2)
            fwd = back
            a, b = pts[(i - back) % n], pts[(i + fwd) % n]
        else:
            back, fwd = min(window, i), min(window, n - 1 - i)
            if back < half or fwd < half:
                continue
            a, b = pts[i - back], pts[i + fwd]
        v1, v2 = pts[i] - a, b - pts[i]
        n1, n2 = np.linalg.norm(v1), np.linalg.norm(v2)
        if n1 == 0 or n2 == 0:
            continue
        c = np.clip(v1 @ v2 / (n1 * n2), -1.0, 1.0)
        ang[i] = math.degrees(math.acos(c))
    return ang


def _turn_points(pts: np.ndarray, window: int, cyclic: bool) -> list[int]:
    ang = _turn_angles(pts, window, cyclic)
    hot = ang >= TURN_ANGLE
    n = len(pts)
    if not hot.any():
        return []
    idx = []
    if cyclic and hot.all():
        return [int(np.argmax(ang))]
    # walk runs of consecutive "hot" samples, starting after a cold one when cyclic
    start = int(np.argmin(hot)) if cyclic else 0
    order = [(start + k) % n for k in range(n)] if cyclic else list(range(n))
    run: list[int] = []
    for i in order + [None]:
        if i is not None and hot[i]:
            run.append(i)
            continue
        if run:
            idx.append(_sharpest(pts, run, window, cyclic))
            run = []
    return sorted(idx)


def _sharpest(pts: np.ndarray, run: list[int], window: int, cyclic: bool) -> int:
    """Pixel of the run farthest from the chord spanning the run +- window."""
    n = len(pts)
    if cyclic:
        a, b = pts[(run[0] - window) % n], pts[(run[-1] + window) % n]
    else:
        a, b = pts[max(run[0] - window, 0)], pts[min(run[-1] + window, n - 1)]
    chord = b - a
    norm = np.linalg.norm(chord)
    if norm == 0:
        return run[len(run) // 2]
    d = [abs(chord[0] * (pts[j][1] - a[1]) - chord[1] * (pts[j][0] - a[0])) / norm for j in run]
    best = max(d)
    ties = [j for j, dj in zip(run, d) if dj >= best - 1e-9]
    return ties[len(ties) // 2]


def _fit_line(pts: np.ndarray):
    c = pts.mean(axis=0)
    w, v = np.linalg.eigh(np.cov((pts - c).T) if len(pts) > 1 else np.eye(2))
    return c, v[:, int(np.argmax(w))]


def _refine(pts: np.ndarray, i: int, window: int, cyclic: bool) -> np.ndarray:
    """Intersect lines fitted on either side of a turn pixel.

    Thinning cuts corners diagonally; the fitted intersection recovers the
    corner of the ink centreline. Falls back to the pixel itself.
    """
    n = len(pts)
    if cyclic:
        before = pts[[(i - k) % n for k in range(2, window + 1)]]
        after = pts[[(i + k) % n for k in range(2, window + 1)]]
    else:
        before = pts[max(0, i - window):max(0, i - 1)]
        after = pts[i + 2:i + window + 1]
    if len(before) < 3 or len(after) < 3:
        return pts[i]
    p1, d1 = _fit_line(before)
    p2, d2 = _fit_line(after)
    det = d1[0] * -d2[1] + d1[1] * d2[0]
    if abs(det) < math.sin(math.radians(TURN_ANGLE / 2)):
        return pts[i]
    r = p2 - p1
    t = (r[0] * -d2[1] + r[1] * d2[0]) / det
    x = p1 + t * d1
    if np.linalg.norm(x - pts[i]) > 2.0:
        return pts[i]
    return x


class _UnionFind:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, a):
        while self.p[a] != a:
            self.p[a] = self.p[self.p[a]]
            a = self.p[a]
        return a

    def union(self, a, b):
        a, b = self.find(a), self.find(b)
        if a != b:
            self.p[max(a, b)] = min(a, b)


def _prune_spurs(topo: _Topology, spur_px: int):
    """Drop short end-to-junction branches, then splice through degree-2 nodes."""
    paths = [list(p) for p in topo.paths]
    changed = True
    while changed:
        changed = False
        degree: dict[int, int] = {}
        for a, b, _ in paths:
            if a >= 0:
                degree[a] = degree.get(a, 0) + 1
                degree[b] = degree.get(b, 0) + 1
        for k, (a, b, pix) in enumerate(paths):
            if a < 0 or a == b:
                continue
            da, db = degree.get(a, 0), degree.get(b, 0)
            if len(pix) < spur_px and ((da == 1 and db >= 3) or (db == 1 and da >= 3)):
                del paths[k]
                changed = True
                break
        if changed:
            continue
        for node in range(len(topo.node_pos)):
            inc = [k for k, (a, b, _) in enumerate(paths) if a >= 0 and a != b and node in (a, b)]
            loops = [k for k, (a, b, _) in enumerate(paths) if a == b == node]
            if len(inc) == 2 and not loops and degree.get(node, 0) == 2 and len(topo.node_pos) > 0:
                if not _is_junction_only(topo, node):
                    continue
                k1, k2 = inc
                a1, b1, p1 = paths[k1]
                a2, b2, p2 = paths[k2]
                if b1 != node:
                    a1, b1, p1 = b1, a1, p1[::-1]
                if a2 != node:
                    a2, b2, p2 = b2, a2, p2[::-1]
                mid = [tuple(np.rint(topo.node_pos[node]).astype(int))]
                merged = (a1, b2, p1 + mid + p2)
                for k in sorted(inc, reverse=True):
                    del paths[k]
                if a1 == b2:
                    merged = (-1, -1, merged[2] + [tuple(np.rint(topo.node_pos[a1]).astype(int))])
                paths.append(merged)
                changed = True
                break
    return paths


def _is_junction_only(topo: _Topology, node: int) -> bool:
    members = [p for p, k in topo.pixel_node.items() if k == node]
    return len(members) > 1 or sum(1 for _ in _neighbours(topo.skel, *members[0])) >= 3


def extract_prior_graph(binary: RasterMap, tangent_window: int = TANGENT_WINDOW, merge_px: float = NODE_MERGE_PX,
                        spur_px: int = SPUR_PX) -> PriorGraph:
    px = np.asarray(binary.pixels)
    if px.max(initial=0) > 1:
        raise ValueError("extract_prior_graph expects a binary raster (use threshold first)")
    skel = skeletonize(px.astype(bool))
    if not skel.any():
        return PriorGraph()
    topo = _Topology(skel)
    paths = _prune_spurs(topo, spur_px)

    positions: list[np.ndarray] = [np.asarray(p, dtype=float) for p in topo.node_pos]
    used_nodes = set()
    raw_edges: list[tuple[int, int]] = []

    def new_node(rc) -> int:
        positions.append(np.asarray(rc, dtype=float))
        return len(positions) - 1

    for a, b, pix in paths:
        if a < 0:
            pts = np.array(pix, dtype=float)
            corners = _turn_points(pts, tangent_window, cyclic=True)
            if not corners:
                continue
            ids = [new_node(_refine(pts, i, tangent_window, True)) for i in corners]
            for k in range(len(ids)):
                if len(ids) > 1:
                    raw_edges.append((ids[k], ids[(k + 1) % len(ids)]))
            used_nodes.update(ids)
            continue
        pts = np.array([topo.node_pos[a]] + [np.asarray(p, float) for p in pix] + [topo.node_pos[b]])
        corners = _turn_points(pts, tangent_window, cyclic=False)
        chain = [a] + [new_node(_refine(pts, i, tangent_window, False)) for i in corners if 0 < i < len(pts) - 1] + [b]
        used_nodes.update(chain)
        raw_edges.extend(zip(chain[:-1], chain[1:]))

    used = sorted(used_nodes)
    if not used:
        return PriorGraph()
    pos = np.array([positions[k] for k in used])
    uf = _UnionFind(len(used))
    for i in range(len(used)):
        for j in range(i + 1, len(used)):
            if np.linalg.norm(pos[i] - pos[j]) < merge_px:
                uf.union(i, j)
    local = {k: i for i, k in enumerate(used)}
    roots = sorted({uf.find(i) for i in range(len(used))})
    root_id = {r: n for n, r in enumerate(roots)}
    groups: dict[int, list[int]] = {}
    for i in range(len(used)):
        groups.setdefault(root_id[uf.find(i)], []).append(i)
    node_rc = np.array([pos[groups[n]].mean(axis=0) for n in range(len(roots))])

    edges = set()
    for a, b in raw_edges:
        ia, ib = root_id[uf.find(local[a])], root_id[uf.find(local[b])]
        if ia != ib:
            edges.add((min(ia, ib), max(ia, ib)))

    h = px.shape[0]
    xy = np.column_stack([node_rc[:, 1], (h - 1) - node_rc[:, 0]]) * binary.pixel_size
    graph = PriorGraph(xy, sorted(edges))
    return graph


def raster_to_prior(raster: RasterMap, level: int = 128) -> PriorGraph:
    return extract_prior_graph(threshold(raster, level))
