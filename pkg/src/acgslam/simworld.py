"""Synthetic floor plans, deformed emergency maps and a simulated 2D lidar.

Worlds are built from axis-aligned rooms. Walls are the union of the room
outlines with door openings cut out; emergency maps are derived from the
same layout by scaling every room about its own centre.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose2
from .graph import AcgGraph
from .prior import PriorGraph

EPS = 1e-6
N_RAYS = 360
MAX_RANGE = 20.0
MIN_CLEARANCE = 0.05
LANDMARK_MATCH_RADIUS = 0.5


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Room:
    label: str
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2])

    def on_boundary(self, p, tol: float = EPS) -> bool:
        x, y = p
        inside_x = self.x0 - tol <= x <= self.x1 + tol
        inside_y = self.y0 - tol <= y <= self.y1 + tol
        on_v = (abs(x - self.x0) <= tol or abs(x - self.x1) <= tol) and inside_y
        on_h = (abs(y - self.y0) <= tol or abs(y - self.y1) <= tol) and inside_x
        return on_v or on_h

    def contains(self, p) -> bool:
        return self.x0 < p[0] < self.x1 and self.y0 < p[1] < self.y1


@dataclass(frozen=True)
class Opening:
    center: tuple
    width: float = 1.0


@dataclass
class World:
    walls: np.ndarray  # (W, 2, 2) segments
    rooms: list[Room] = field(default_factory=list)
    true_corners: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def wall_graph(self) -> PriorGraph:
        """Corners as nodes, wall pieces between consecutive corners as edges."""
        return _segments_to_graph(self.walls, self.true_corners)


@dataclass
class DeformedPrior:
    graph: PriorGraph
    correspondence: list  # per prior node: index into World.true_corners or None
    undeformed: np.ndarray  # node positions before deformation

    def corresponded(self) -> list[tuple[int, int]]:
        return [(i, c) for i, c in enumerate(self.correspondence) if c is not None]


@dataclass
class NoiseModel:
    odom_trans: float = 0.0  # m per m travelled
    odom_rot: float = 0.0  # rad per m travelled
    scan: float = 0.0  # m, isotropic endpoint noise
    corner_dropout: float = 0.0
    odom_bias: tuple = (0.0, 0.0, 0.0)  # systematic (dx, dy, dtheta) per m travelled

    def __post_init__(self):
        for name in ("odom_trans", "odom_rot", "scan", "corner_dropout"):
            if getattr(self, name) < 0:
                raise ScenarioError(f"noise {name} must be >= 0")
        if self.corner_dropout > 1:
            raise ScenarioError("corner_dropout must be a probability")
        self.odom_bias = tuple(float(v) for v in self.odom_bias)

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls()


@dataclass
class StepInput:
    odometry_delta: Pose2
    odometry_information: np.ndarray
    scan_points: np.ndarray  # (N, 2) robot frame

    def __post_init__(self):
        self.scan_points = np.asarray(self.scan_points, dtype=float).reshape(-1, 2)
        self.odometry_information = np.asarray(self.odometry_information, dtype=float)
        if not (np.all(np.isfinite(self.scan_points)) and np.all(np.isfinite(self.odometry_information))
                and np.all(np.isfinite(self.odometry_delta.as_array()))):
            raise ScenarioError("step input has non-finite values")


# -- world construction -----------------------------------------------------


def _merge_intervals(iv):
    iv = sorted(iv)
    out = []
    for a, b in iv:
        if out and a <= out[-1][1] + EPS:
            out[-1][1] = max(out[-1][1], b)
        else:
            out.append([a, b])
    return out


def _cut(iv, a, b):
    out = []
    for x0, x1 in iv:
        if b <= x0 + EPS or a >= x1 - EPS:
            out.append([x0, x1])
            continue
        if a > x0 + EPS:
            out.append([x0, a])
        if b < x1 - EPS:
            out.append([b, x1])
    return out


def build_walls(rooms: Sequence[Room], openings: Sequence[Opening] = (), extra=()) -> np.ndarray:
    """Union of room outlines and extra axis-aligned walls, minus openings."""
    horiz: dict[float, list] = {}
    vert: dict[float, list] = {}

    def add(p, q):
        (x0, y0), (x1, y1) = p, q
        if abs(y0 - y1) < EPS:
            horiz.setdefault(round(y0, 9), []).append((min(x0, x1), max(x0, x1)))
        elif abs(x0 - x1) < EPS:
            vert.setdefault(round(x0, 9), []).append((min(y0, y1), max(y0, y1)))
        else:
            raise ScenarioError(f"wall ({p}, {q}) is not axis aligned")

    for r in rooms:
        add((r.x0, r.y0), (r.x1, r.y0))
        add((r.x0, r.y1), (r.x1, r.y1))
        add((r.x0, r.y0), (r.x0, r.y1))
        add((r.x1, r.y0), (r.x1, r.y1))
    for p, q in extra:
        add(p, q)
    horiz = {k: _merge_intervals(v) for k, v in horiz.items()}
    vert = {k: _merge_intervals(v) for k, v in vert.items()}
    for op in openings:
        cx, cy = op.center
        h = op.width / 2
        hit = False
        for y, iv in horiz.items():
            if abs(y - cy) < EPS and any(a - EPS <= cx <= b + EPS for a, b in iv):
                horiz[y] = _cut(iv, cx - h, cx + h)
                hit = True
        for x, iv in vert.items():
            if abs(x - cx) < EPS and any(a - EPS <= cy <= b + EPS for a, b in iv):
                vert[x] = _cut(iv, cy - h, cy + h)
                hit = True
        if not hit:
            raise ScenarioError(f"opening at {op.center} is not on a wall")
    segs = []
    for y in sorted(horiz):
        for a, b in horiz[y]:
            if b - a > EPS:
                segs.append(((a, y), (b, y)))
    for x in sorted(vert):
        for a, b in vert[x]:
            if b - a > EPS:
                segs.append(((x, a), (x, b)))
    return np.array(segs, dtype=float).reshape(-1, 2, 2)


def _dedupe(points, tol=EPS) -> np.ndarray:
    out: list[np.ndarray] = []
    for p in sorted(map(tuple, points)):
        if not any(abs(p[0] - q[0]) <= tol and abs(p[1] - q[1]) <= tol for q in out):
            out.append(np.array(p))
    return np.array(out).reshape(-1, 2)


def find_corners(walls: np.ndarray) -> np.ndarray:
    """Segment end points and wall intersections, de-duplicated within 1e-6."""
    pts = [tuple(p) for seg in walls for p in seg]
    horiz = [s for s in walls if abs(s[0, 1] - s[1, 1]) < EPS]
    vert = [s for s in walls if abs(s[0, 0] - s[1, 0]) < EPS]
    for h in horiz:
        y, xa, xb = h[0, 1], min(h[0, 0], h[1, 0]), max(h[0, 0], h[1, 0])
        for v in vert:
            x, ya, yb = v[0, 0], min(v[0, 1], v[1, 1]), max(v[0, 1], v[1, 1])
            if xa - EPS <= x <= xb + EPS and ya - EPS <= y <= yb + EPS:
                pts.append((x, y))
    return _dedupe(pts)


def _segments_to_graph(walls: np.ndarray, corners: np.ndarray) -> PriorGraph:
    edges = set()
    for a, b in walls:
        d = b - a
        length = np.linalg.norm(d)
        u = d / length
        rel = corners - a
        along = rel @ u
        perp = np.abs(rel[:, 0] * u[1] - rel[:, 1] * u[0])
        on = np.flatnonzero((perp < 1e-6) & (along > -1e-6) & (along < length + 1e-6))
        on = on[np.argsort(along[on])]
        for i, j in zip(on[:-1], on[1:]):
            edges.add((int(min(i, j)), int(max(i, j))))
    return PriorGraph(corners.copy(), sorted(edges))


def make_world(rooms: Sequence[Room], doors: Sequence[Opening] = (), extra_walls=()) -> World:
    walls = build_walls(rooms, doors, extra_walls)
    return World(walls, list(rooms), find_corners(walls))


# -- deformation -----------------------------------------------------------


def deform_points(points: np.ndarray, rooms: Sequence[Room], room_scales: dict) -> np.ndarray:
    out = np.array(points, dtype=float).reshape(-1, 2).copy()
    for i, p in enumerate(out):
        moved = []
        for r in rooms:
            if r.on_boundary(p):
                sx, sy = room_scales.get(r.label, (1.0, 1.0))
                c = r.center
                moved.append(c + (p - c) * np.array([sx, sy]))
        if moved:
            out[i] = np.mean(moved, axis=0)
    return out


def deform(world: World, room_scales: dict, prior_world: Optional[World] = None) -> DeformedPrior:
    """Scale every room about its centre; shared corners take the average.

    ``prior_world`` is the layout drawn on the emergency map when it differs
    from the real one (e.g. a door that is closed in reality is drawn open).
    """
    for label, (sx, sy) in room_scales.items():
        if not (sx > 0 and sy > 0):
            raise ScenarioError(f"room {label} has a non-positive scale")
    src = prior_world if prior_world is not None else world
    base = src.wall_graph()
    corr = []
    for p in base.nodes:
        d = np.linalg.norm(world.true_corners - p, axis=1) if len(world.true_corners) else np.zeros(0)
        k = int(np.argmin(d)) if len(d) else -1
        corr.append(k if k >= 0 and d[k] < 1e-6 else None)
    nodes = deform_points(base.nodes, src.rooms, room_scales)
    return DeformedPrior(PriorGraph(nodes, base.edges), corr, base.nodes.copy())


# -- simulation ------------------------------------------------------------


def raycast(walls: np.ndarray, pose: Pose2, n_rays: int = N_RAYS, max_range: float = MAX_RANGE):
    """Noise-free ray endpoints (world frame) and a hit mask."""
    ang = pose.theta + np.arange(n_rays) * (2 * math.pi / n_rays)
    d = np.column_stack([np.cos(ang), np.sin(ang)])  # (R, 2)
    o = pose.translation
    a = walls[:, 0]  # (W, 2)
    s = walls[:, 1] - walls[:, 0]
    # o + t d = a + u s
    denom = d[:, None, 0] * s[None, :, 1] - d[:, None, 1] * s[None, :, 0]  # (R, W)
    ao = a[None, :, :] - o[None, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ao[..., 0] * s[None, :, 1] - ao[..., 1] * s[None, :, 0]) / denom
        u = (ao[..., 0] * d[:, None, 1] - ao[..., 1] * d[:, None, 0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= -1e-12) & (u <= 1 + 1e-12) & (t <= max_range)
    t = np.where(ok, t, np.inf)
    best = t.min(axis=1)
    hit = np.isfinite(best)
    pts = o + d * np.where(hit, best, 0.0)[:, None]
    return pts, hit


def _point_segment_distance(p: np.ndarray, walls: np.ndarray) -> np.ndarray:
    a, b = walls[:, 0], walls[:, 1]
    ab = b - a
    t = np.clip(np.einsum("wi,wi->w", p - a, ab) / np.einsum("wi,wi->w", ab, ab), 0, 1)
    proj = a + t[:, None] * ab
    return np.linalg.norm(proj - p, axis=1)


def _crosses(p: np.ndarray, q: np.ndarray, walls: np.ndarray) -> bool:
    d = q - p
    a = walls[:, 0]
    s = walls[:, 1] - walls[:, 0]
    denom = d[0] * s[:, 1] - d[1] * s[:, 0]
    ap = a - p
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ap[:, 0] * s[:, 1] - ap[:, 1] * s[:, 0]) / denom
        u = (ap[:, 0] * d[1] - ap[:, 1] * d[0]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > 0) & (t < 1) & (u > 0) & (u < 1)
    return bool(ok.any())


def odometry_information(distance: float, noise: NoiseModel) -> np.ndarray:
    st = max(noise.odom_trans * distance, 1e-3)
    sr = max(noise.odom_rot * distance, 1e-3)
    return np.diag([1 / st**2, 1 / st**2, 1 / sr**2])


def simulate(world: World, trajectory: Sequence[Pose2], noise: NoiseModel, seed: int,
             n_rays: int = N_RAYS, max_range: float = MAX_RANGE) -> list[StepInput]:
    """Noisy odometry and one lidar scan per trajectory pose.

    The first step carries an identity odometry delta (the robot starts at
    the first trajectory pose).
    """
    rng = np.random.default_rng(seed)
    walls = world.walls
    for k, pose in enumerate(trajectory):
        if len(walls) and _point_segment_distance(pose.translation, walls).min() < MIN_CLEARANCE:
            raise ScenarioError(f"trajectory step {k} is inside a wall")
        if k and len(walls) and _crosses(trajectory[k - 1].translation, pose.translation, walls):
            raise ScenarioError(f"trajectory step {k} passes through a wall")
    steps = []
    bias = np.array(noise.odom_bias)
    for k, pose in enumerate(trajectory):
        if k == 0:
            delta = Pose2.identity()
            dist = 0.0
        else:
            true_delta = trajectory[k - 1].between(pose)
            dist = math.hypot(true_delta.x, true_delta.y)
            eps = rng.normal(0.0, 1.0, 3) * np.array([noise.odom_trans, noise.odom_trans, noise.odom_rot]) * dist
            eps = eps + bias * dist
            delta = true_delta.compose(Pose2(*eps))
        pts, hit = raycast(walls, pose, n_rays, max_range)
        pts = pts[hit]
        if noise.scan > 0:
            pts = pts + rng.normal(0.0, noise.scan, pts.shape)
        if noise.corner_dropout > 0 and len(world.true_corners):
            drop = rng.random(len(world.true_corners)) < noise.corner_dropout
            for c in world.true_corners[drop]:
                pts = pts[np.linalg.norm(pts - c, axis=1) > 0.6]
        info = odometry_information(dist, noise) if k else odometry_information(1.0, noise)
        steps.append(StepInput(delta, info, pose.inverse_transform_point(pts)))
    return steps


def expand_waypoints(waypoints, step: float = 2.0) -> list[Pose2]:
    """Poses every ``step`` metres along a polyline, heading along travel."""
    wp = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(wp) == 0:
        return []
    if len(wp) == 1:
        return [Pose2(wp[0, 0], wp[0, 1], 0.0)]
    seg = np.diff(wp, axis=0)
    lengths = np.linalg.norm(seg, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    total = cum[-1]
    n = int(math.floor(total / step + 1e-9))
    stations = [i * step for i in range(n + 1)]
    if total - stations[-1] > 0.25 * step:
        stations.append(total)
    poses = []
    for s in stations:
        k = min(int(np.searchsorted(cum, s, side="right") - 1), len(seg) - 1)
        while k < len(seg) - 1 and lengths[k] == 0:
            k += 1
        t = (s - cum[k]) / lengths[k] if lengths[k] > 0 else 0.0
        p = wp[k] + t * seg[k]
        heading = math.atan2(seg[k, 1], seg[k, 0])
        poses.append(Pose2(p[0], p[1], heading))
    return poses


# -- correspondence oracle ---------------------------------------------------


def landmark_truth(graph: AcgGraph, true_poses: dict) -> dict:
    """Noise-free position of every landmark: its measurement at the true pose."""
    out = {}
    for e in graph.observation_edges:
        if e.pose in true_poses:
            out[e.landmark] = true_poses[e.pose].transform_point(e.measurement)
    return out


def landmark_correspondence(graph: AcgGraph, true_poses: dict, world: World,
                            radius: float = LANDMARK_MATCH_RADIUS) -> dict:
    """Landmark id -> index of the nearest true corner within ``radius`` (or None)."""
    truth = landmark_truth(graph, true_poses)
    out = {}
    for lid in graph.landmarks:
        p = truth.get(lid)
        if p is None or not len(world.true_corners):
            out[lid] = None
            continue
        d = np.linalg.norm(world.true_corners - p, axis=1)
        k = int(np.argmin(d))
        out[lid] = k if d[k] <= radius else None
    return out


def outlier_fraction(graph: AcgGraph, prior: DeformedPrior, prior_ids: Sequence[int], true_poses: dict,
                     world: World) -> float:
    """Share of link edges whose landmark and prior node are different corners."""
    if not graph.link_edges:
        raise ScenarioError("no link edges; outlier fraction undefined")
    lm_corr = landmark_correspondence(graph, true_poses, world)
    pr_corr = {pid: prior.correspondence[i] for i, pid in enumerate(prior_ids)}
    bad = 0
    for e in graph.link_edges:
        a, b = lm_corr.get(e.landmark), pr_corr.get(e.prior)
        if a is None or b is None or a != b:
            bad += 1
    return bad / len(graph.link_edges)


# -- scenarios -----------------------------------------------------------------


@dataclass
class Scenario:
    name: str
    world: World
    prior_world: World
    room_scales: dict
    prior: DeformedPrior
    trajectory: list[Pose2]
    noise: NoiseModel
    seed: int
    anchors: list  # [(prior node index, world point)] * 2
    goal: Optional[np.ndarray] = None
    spec: dict = field(default_factory=dict)

    def anchor_pairs(self):
        return [(self.prior.graph.nodes[i], np.asarray(w, dtype=float)) for i, w in self.anchors]

    def true_pose_map(self, pose_ids: Sequence[int]) -> dict:
        return {pid: self.trajectory[k] for k, pid in enumerate(pose_ids)}


BUILTIN = ("standard", "corridor-door", "corridor-bias")


def _rooms(spec) -> list[Room]:
    out = []
    for r in spec.get("rooms", []):
        x0, y0, x1, y1 = (float(v) for v in r["rect"])
        if not (x1 > x0 and y1 > y0):
            raise ScenarioError(f"room {r.get('label')} has an empty rectangle")
        out.append(Room(str(r["label"]), x0, y0, x1, y1))
    return out


def _openings(items) -> list[Opening]:
    return [Opening(tuple(float(v) for v in o["center"]), float(o.get("width", 1.0))) for o in items]


def _room_scales(spec, rooms, rng) -> dict:
    scales = {r.label: (1.0, 1.0) for r in rooms}
    if "scale_range" in spec:
        lo, hi = (float(v) for v in spec["scale_range"])
        for r in rooms:
            scales[r.label] = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
    for label, s in spec.get("scales", {}).items():
        scales[label] = (float(s[0]), float(s[1]))
    return scales


def _clutter(cfg: dict, rooms, doors, trajectory, rng) -> list:
    """Random axis-aligned boxes inside rooms, clear of walls, doors and the path."""
    per_room = int(cfg.get("per_room", 2))
    lo, hi = (float(v) for v in cfg.get("size", (0.4, 0.9)))
    wall_gap = float(cfg.get("wall_gap", 0.3))
    path_gap = float(cfg.get("path_gap", 0.8))
    door_gap = float(cfg.get("door_gap", 1.2))
    path = np.array([p.translation for p in trajectory]).reshape(-1, 2)
    segs = np.stack([path[:-1], path[1:]], axis=1) if len(path) > 1 else np.zeros((0, 2, 2))
    door_pts = np.array([d.center for d in doors], dtype=float).reshape(-1, 2)
    boxes = []
    for room in rooms:
        placed = 0
        for _ in range(200):
            if placed == per_room:
                break
            w, h = rng.uniform(lo, hi, 2)
            x0 = rng.uniform(room.x0 + wall_gap, room.x1 - wall_gap - w) if room.x1 - room.x0 > w + 2 * wall_gap else None
            y0 = rng.uniform(room.y0 + wall_gap, room.y1 - wall_gap - h) if room.y1 - room.y0 > h + 2 * wall_gap else None
            if x0 is None or y0 is None:
                break
            box = (x0, y0, x0 + w, y0 + h)
            centre = np.array([x0 + w / 2, y0 + h / 2])
            r = math.hypot(w, h) / 2
            if len(segs) and _point_segment_distance(centre, segs).min() < path_gap + r:
                continue
            if len(door_pts) and np.linalg.norm(door_pts - centre, axis=1).min() < door_gap + r:
                continue
            if any(b[0] - wall_gap < box[2] and box[0] < b[2] + wall_gap and b[1] - wall_gap < box[3]
                   and box[1] < b[3] + wall_gap for b in boxes):
                continue
            boxes.append(tuple(round(v, 3) for v in box))
            placed += 1
    return boxes


def build_scenario(spec: dict, seed: Optional[int] = None) -> Scenario:
    """Materialise a scenario document. ``seed`` overrides the document seed."""
    try:
        seed = int(spec.get("seed", 0) if seed is None else seed)
        rooms = _rooms(spec)
        doors = _openings(spec.get("doors", []))
        closed = _openings(spec.get("closed_doors", []))
        extra = [tuple(map(tuple, w)) for w in spec.get("extra_walls", [])]
        furniture = []
        for box in spec.get("furniture", []):
            x0, y0, x1, y1 = (float(v) for v in box)
            furniture += [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))]
        trajectory = expand_waypoints(spec["waypoints"], float(spec.get("step_length", 2.0)))
        rng = np.random.default_rng([seed, 0xACE])
        if "clutter" in spec:
            for box in _clutter(spec["clutter"], rooms, doors, trajectory, rng):
                x0, y0, x1, y1 = box
                furniture += [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))]
        # furniture is real but never drawn on the emergency map
        world = make_world(rooms, doors, extra + furniture)
        prior_world = make_world(rooms, doors + closed, extra) if closed or furniture else world
        scales = _room_scales(spec, rooms, rng)
        prior = deform(world, scales, prior_world)
        noise = NoiseModel(**spec.get("noise", {}))
        anchors = []
        anchor_noise = float(spec.get("anchor_noise", 0.0))
        for w in spec.get("anchors", [])[:2]:
            w = np.asarray(w, dtype=float)
            d = np.linalg.norm(prior.undeformed - w, axis=1)
            i = int(np.argmin(d))
            if d[i] > 1e-6:
                raise ScenarioError(f"anchor {w.tolist()} is not a prior corner")
            anchors.append((i, w + rng.normal(0.0, anchor_noise, 2) if anchor_noise > 0 else w))
        if spec.get("anchors") and len(anchors) != 2:
            raise ScenarioError("exactly two anchors are required")
        goal = np.asarray(spec["goal"], dtype=float) if "goal" in spec else None
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario: {exc!r}") from None
    return Scenario(str(spec.get("name", "scenario")), world, prior_world, scales, prior, trajectory, noise,
                    seed, anchors, goal, spec)


def load_scenario_spec(name_or_path) -> dict:
    """A bundled scenario by name, or a JSON document on disk."""
    if str(name_or_path) in BUILTIN:
        text = resources.files("acgslam.scenarios").joinpath(f"{name_or_path}.json").read_text(encoding="utf-8")
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise ScenarioError(f"scenario file not found: {path}")
        text = path.read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"malformed scenario JSON: {exc}") from None


def load_scenario(name_or_path, seed: Optional[int] = None) -> Scenario:
    return build_scenario(load_scenario_spec(name_or_path), seed)
