"""The auto-complete graph: pose, landmark and prior nodes plus their edges."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose2, anisotropic_cov, is_spd
from .prior import PriorGraph

OBSERVATION_VARIANCE = 0.05  # (sqrt(0.05) m)^2
LINK_VARIANCE = 0.5  # (sqrt(0.5) m)^2
PRIOR_PERPENDICULAR_VARIANCE = 0.005
DEFAULT_EIGENVALUE_FRACTION = 0.5

OBSERVATION_INFORMATION = np.eye(2) / OBSERVATION_VARIANCE
LINK_INFORMATION = np.eye(2) / LINK_VARIANCE


class GraphError(ValueError):
    pass


class GraphParseError(GraphError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class OdometryEdge:
    i: int
    j: int
    measurement: Pose2
    information: np.ndarray


@dataclass
class ObservationEdge:
    pose: int
    landmark: int
    measurement: np.ndarray
    information: np.ndarray


@dataclass
class PriorEdge:
    a: int
    b: int
    measurement: np.ndarray
    information: np.ndarray


@dataclass
class LinkEdge:
    landmark: int
    prior: int
    information: np.ndarray = field(default_factory=lambda: LINK_INFORMATION.copy())

    @property
    def measurement(self) -> np.ndarray:
        return np.zeros(2)


@dataclass
class LinkCandidatePolicy:
    max_distance: float = 2.0

    def __post_init__(self):
        if not self.max_distance > 0:
            raise ValueError("max_distance must be positive")


@dataclass
class PartialMap:
    """Rigid sensor data attached to a pose node.

    ``grid`` lives in the world frame of ``anchor`` (the pose estimate the
    map was built at); ``scan`` holds the raw points in the robot frame.
    """

    grid: object
    anchor: Pose2
    scan: Optional[np.ndarray] = None


def _check_info(info, shape, what) -> np.ndarray:
    info = np.array(info, dtype=float)
    if info.shape != shape or not is_spd(info, tol=1e-9):
        raise GraphError(f"{what} information must be a symmetric positive definite {shape} matrix")
    return 0.5 * (info + info.T)


def similarity_from_pairs(src_a, src_b, dst_a, dst_b):
    """Rotation, uniform scale and translation mapping src_a->dst_a, src_b->dst_b.

    Returns (scale * R, t) so that ``dst = src @ M.T + t``.
    """
    src_a, src_b, dst_a, dst_b = (np.asarray(v, dtype=float) for v in (src_a, src_b, dst_a, dst_b))
    ds, dd = src_b - src_a, dst_b - dst_a
    ns, nd = np.linalg.norm(ds), np.linalg.norm(dd)
    if ns < 1e-12 or nd < 1e-12:
        raise GraphError("anchor points must be distinct")
    scale = nd / ns
    ang = math.atan2(dd[1], dd[0]) - math.atan2(ds[1], ds[0])
    c, s = math.cos(ang), math.sin(ang)
    m = scale * np.array([[c, -s], [s, c]])
    t = dst_a - m @ src_a
    return m, t


def prior_edge_information(displacement, fraction: float) -> np.ndarray:
    length = float(np.linalg.norm(displacement))
    if length <= 0:
        raise GraphError("prior edge has zero length")
    cov = anisotropic_cov(np.asarray(displacement) / length, fraction * length, PRIOR_PERPENDICULAR_VARIANCE)
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)


class AcgGraph:
    def __init__(self):
        self.poses: dict[int, Pose2] = {}
        self.landmarks: dict[int, np.ndarray] = {}
        self.priors: dict[int, np.ndarray] = {}
        self.fixed: set[int] = set()
        self.partial_maps: dict[int, PartialMap] = {}
        self.odometry_edges: list[OdometryEdge] = []
        self.observation_edges: list[ObservationEdge] = []
        self.prior_edges: list[PriorEdge] = []
        self.link_edges: list[LinkEdge] = []
        self._link_pairs: set[tuple[int, int]] = set()
        self._next_id = 0

    # -- bookkeeping -------------------------------------------------------

    def _new_id(self, wanted: Optional[int] = None) -> int:
        if wanted is None:
            wanted = self._next_id
        if wanted in self.poses or wanted in self.landmarks or wanted in self.priors:
            raise GraphError(f"node id {wanted} already used")
        self._next_id = max(self._next_id, wanted + 1)
        return wanted

    @property
    def pose_ids(self) -> list[int]:
        return sorted(self.poses)

    @property
    def last_pose_id(self) -> Optional[int]:
        return max(self.poses) if self.poses else None

    def edge_count(self) -> int:
        return len(self.odometry_edges) + len(self.observation_edges) + len(self.prior_edges) + len(self.link_edges)

    def copy(self) -> "AcgGraph":
        g = AcgGraph()
        g.poses = dict(self.poses)
        g.landmarks = {k: v.copy() for k, v in self.landmarks.items()}
        g.priors = {k: v.copy() for k, v in self.priors.items()}
        g.fixed = set(self.fixed)
        g.partial_maps = dict(self.partial_maps)
        g.odometry_edges = list(self.odometry_edges)
        g.observation_edges = list(self.observation_edges)
        g.prior_edges = list(self.prior_edges)
        g.link_edges = list(self.link_edges)
        g._link_pairs = set(self._link_pairs)
        g._next_id = self._next_id
        return g

    # -- construction ------------------------------------------------------

    def add_pose_node(self, pose: Pose2, partial_map: Optional[PartialMap] = None,
                      odometry_from_previous: Optional[Pose2] = None, odometry_information=None,
                      node_id: Optional[int] = None) -> int:
        prev = self.last_pose_id
        if prev is not None:
            if odometry_from_previous is None or odometry_information is None:
                raise GraphError("odometry measurement and information required after the first pose")
            info = _check_info(odometry_information, (3, 3), "odometry")
        nid = self._new_id(node_id)
        self.poses[nid] = pose
        if partial_map is not None:
            self.partial_maps[nid] = partial_map
        if prev is None:
            self.fixed.add(nid)
        else:
            self.odometry_edges.append(OdometryEdge(prev, nid, odometry_from_previous, info))
        return nid

    def add_odometry_edge(self, i: int, j: int, measurement: Pose2, information) -> None:
        if i not in self.poses or j not in self.poses:
            raise GraphError(f"odometry edge ({i}, {j}) references a missing pose")
        self.odometry_edges.append(OdometryEdge(i, j, measurement, _check_info(information, (3, 3), "odometry")))

    def add_landmark(self, pose_id: int, corner_in_pose_frame, information=None, node_id: Optional[int] = None,
                     position=None) -> int:
        if pose_id not in self.poses:
            raise GraphError(f"unknown pose id {pose_id}")
        z = np.asarray(corner_in_pose_frame, dtype=float).reshape(2)
        info = OBSERVATION_INFORMATION if information is None else _check_info(information, (2, 2), "observation")
        nid = self._new_id(node_id)
        self.landmarks[nid] = (self.poses[pose_id].transform_point(z) if position is None
                               else np.asarray(position, dtype=float).reshape(2).copy())
        self.observation_edges.append(ObservationEdge(pose_id, nid, z, info.copy()))
        return nid

    def add_prior_node(self, position, node_id: Optional[int] = None) -> int:
        nid = self._new_id(node_id)
        self.priors[nid] = np.asarray(position, dtype=float).reshape(2).copy()
        return nid

    def add_prior_edge(self, a: int, b: int, measurement, information) -> None:
        if a not in self.priors or b not in self.priors:
            raise GraphError(f"prior edge ({a}, {b}) references a missing prior node")
        if a == b:
            raise GraphError("prior edge endpoints must differ")
        self.prior_edges.append(PriorEdge(a, b, np.asarray(measurement, dtype=float).reshape(2),
                                          _check_info(information, (2, 2), "prior")))

    def add_prior(self, prior: PriorGraph, anchor_pairs=None, eigenvalue_fraction: float = DEFAULT_EIGENVALUE_FRACTION
                  ) -> list[int]:
        """Insert an emergency-map graph, placed by a two point similarity.

        ``anchor_pairs`` is ((prior_a, world_a), (prior_b, world_b)); None keeps
        the prior coordinates. Returns the new prior node ids in input order.
        """
        if not eigenvalue_fraction > 0:
            raise GraphError("eigenvalue_fraction must be positive")
        nodes = np.asarray(prior.nodes, dtype=float).reshape(-1, 2)
        if anchor_pairs is not None:
            (sa, da), (sb, db) = anchor_pairs
            m, t = similarity_from_pairs(sa, sb, da, db)
            nodes = nodes @ m.T + t
        ids = [self.add_prior_node(p) for p in nodes]
        for a, b in prior.edges:
            d = nodes[b] - nodes[a]
            self.add_prior_edge(ids[a], ids[b], d, prior_edge_information(d, eigenvalue_fraction))
        return ids

    def add_link(self, landmark: int, prior: int, information=None) -> bool:
        if landmark not in self.landmarks or prior not in self.priors:
            raise GraphError(f"link ({landmark}, {prior}) references a missing node")
        if (landmark, prior) in self._link_pairs:
            return False
        info = LINK_INFORMATION if information is None else _check_info(information, (2, 2), "link")
        self._link_pairs.add((landmark, prior))
        self.link_edges.append(LinkEdge(landmark, prior, info.copy()))
        return True

    def generate_link_edges(self, policy: Optional[LinkCandidatePolicy] = None) -> int:
        """Link every landmark to every prior node within ``policy.max_distance``."""
        policy = policy or LinkCandidatePolicy()
        if not self.landmarks or not self.priors:
            return 0
        lm_ids = sorted(self.landmarks)
        pr_ids = sorted(self.priors)
        lm = np.array([self.landmarks[k] for k in lm_ids])
        pr = np.array([self.priors[k] for k in pr_ids])
        hits = cKDTree(pr).query_ball_point(lm, policy.max_distance)
        added = 0
        for li, cand in zip(lm_ids, hits):
            for pi in sorted(cand):
                if self.add_link(li, pr_ids[pi]):
                    added += 1
        return added

    # -- checks ------------------------------------------------------------

    def validate(self) -> None:
        for e in self.odometry_edges:
            if e.i not in self.poses or e.j not in self.poses:
                raise GraphError(f"odometry edge ({e.i}, {e.j}) references a missing pose")
            _check_info(e.information, (3, 3), "odometry")
        for e in self.observation_edges:
            if e.pose not in self.poses or e.landmark not in self.landmarks:
                raise GraphError(f"observation edge ({e.pose}, {e.landmark}) references a missing node")
            _check_info(e.information, (2, 2), "observation")
        for e in self.prior_edges:
            if e.a not in self.priors or e.b not in self.priors:
                raise GraphError(f"prior edge ({e.a}, {e.b}) references a missing node")
            _check_info(e.information, (2, 2), "prior")
        for e in self.link_edges:
            if e.landmark not in self.landmarks or e.prior not in self.priors:
                raise GraphError(f"link edge ({e.landmark}, {e.prior}) references a missing node")
            _check_info(e.information, (2, 2), "link")

    def summary(self) -> dict:
        return {
            "poses": len(self.poses),
            "landmarks": len(self.landmarks),
            "priors": len(self.priors),
            "odometry_edges": len(self.odometry_edges),
            "observation_edges": len(self.observation_edges),
            "prior_edges": len(self.prior_edges),
            "link_edges": len(self.link_edges),
        }


# -- exchange format -------------------------------------------------------

HEADER = "ACG 1"


def _f(v: float) -> str:
    return format(float(v), ".17g")


def serialize(graph: AcgGraph) -> str:
    lines = [HEADER]
    for k in sorted(graph.poses):
        p = graph.poses[k]
        lines.append(f"POSE {k} {_f(p.x)} {_f(p.y)} {_f(p.theta)}")
    for k in sorted(graph.landmarks):
        x, y = graph.landmarks[k]
        lines.append(f"LANDMARK {k} {_f(x)} {_f(y)}")
    for k in sorted(graph.priors):
        x, y = graph.priors[k]
        lines.append(f"PRIOR {k} {_f(x)} {_f(y)}")
    for e in graph.odometry_edges:
        m, i = e.measurement, e.information
        vals = [m.x, m.y, m.theta, i[0, 0], i[0, 1], i[0, 2], i[1, 1], i[1, 2], i[2, 2]]
        lines.append(f"EDGE_ODOM {e.i} {e.j} " + " ".join(_f(v) for v in vals))
    for e in graph.observation_edges:
        i = e.information
        vals = [e.measurement[0], e.measurement[1], i[0, 0], i[0, 1], i[1, 1]]
        lines.append(f"EDGE_OBS {e.pose} {e.landmark} " + " ".join(_f(v) for v in vals))
    for e in graph.prior_edges:
        i = e.information
        vals = [e.measurement[0], e.measurement[1], i[0, 0], i[0, 1], i[1, 1]]
        lines.append(f"EDGE_PRIOR {e.a} {e.b} " + " ".join(_f(v) for v in vals))
    for e in graph.link_edges:
        i = e.information
        lines.append(f"EDGE_LINK {e.landmark} {e.prior} " + " ".join(_f(v) for v in (i[0, 0], i[0, 1], i[1, 1])))
    return "\n".join(lines) + "\n"


_ARITY = {
    "POSE": (1, 3),
    "LANDMARK": (1, 2),
    "PRIOR": (1, 2),
    "EDGE_ODOM": (2, 9),
    "EDGE_OBS": (2, 5),
    "EDGE_PRIOR": (2, 5),
    "EDGE_LINK": (2, 3),
}


def _sym2(a, b, c):
    return np.array([[a, b], [b, c]])


def _sym3(a, b, c, d, e, f):
    return np.array([[a, b, c], [b, d, e], [c, e, f]])


def deserialize(text: str) -> AcgGraph:
    g = AcgGraph()
    header_seen = False
    deferred = []
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if not header_seen:
            if line.split() != HEADER.split():
                raise GraphParseError(n, f"expected header {HEADER!r}, got {line!r}")
            header_seen = True
            continue
        parts = line.split()
        tag = parts[0]
        if tag not in _ARITY:
            raise GraphParseError(n, f"unknown record {tag!r}")
        n_ids, n_vals = _ARITY[tag]
        if len(parts) != 1 + n_ids + n_vals:
            raise GraphParseError(n, f"{tag} expects {n_ids + n_vals} fields, got {len(parts) - 1}")
        try:
            ids = [int(v) for v in parts[1:1 + n_ids]]
            vals = [float(v) for v in parts[1 + n_ids:]]
        except ValueError as exc:
            raise GraphParseError(n, str(exc)) from None
        if not all(math.isfinite(v) for v in vals):
            raise GraphParseError(n, "non-finite number")
        if tag.startswith("EDGE"):
            deferred.append((n, tag, ids, vals))
            continue
        try:
            if tag == "POSE":
                g.poses[g._new_id(ids[0])] = Pose2(*vals)
            elif tag == "LANDMARK":
                g.landmarks[g._new_id(ids[0])] = np.array(vals)
            else:
                g.priors[g._new_id(ids[0])] = np.array(vals)
        except GraphError as exc:
            raise GraphParseError(n, str(exc)) from None
    if not header_seen:
        raise GraphParseError(1, f"missing header {HEADER!r}")
    for n, tag, ids, vals in deferred:
        try:
            if tag == "EDGE_ODOM":
                g.add_odometry_edge(ids[0], ids[1], Pose2(*vals[:3]), _sym3(*vals[3:]))
            elif tag == "EDGE_OBS":
                a, b = ids
                if a not in g.poses or b not in g.landmarks:
                    raise GraphError(f"observation edge ({a}, {b}) references a missing node")
                g.observation_edges.append(ObservationEdge(a, b, np.array(vals[:2]),
                                                           _check_info(_sym2(*vals[2:]), (2, 2), "observation")))
            elif tag == "EDGE_PRIOR":
                g.add_prior_edge(ids[0], ids[1], vals[:2], _sym2(*vals[2:]))
            else:
                g.add_link(ids[0], ids[1], _sym2(*vals))
        except (GraphError, ValueError) as exc:
            raise GraphParseError(n, str(exc)) from None
    if g.poses:
        g.fixed.add(min(g.poses))
    return g
