"""Synthetic fixtures shared by the unit and acceptance tests."""

import numpy as np

from acgslam.solver import Problem

from acgslam.geometry import Pose2
from acgslam.graph import AcgGraph
from acgslam.prior import PriorGraph

ODO_INFO = np.diag([400.0, 400.0, 2500.0])


def consistent_graph(rng, n_poses=8, n_corners=10, noise=0.0):
    """Graph whose measurements agree exactly with ``truth``; initial estimates perturbed by ``noise``."""
    poses = [Pose2.identity()]
    for _ in range(n_poses - 1):
        poses.append(poses[-1].compose(Pose2(rng.uniform(0.5, 1.5), rng.uniform(-0.3, 0.3), rng.uniform(-0.4, 0.4))))
    corners = rng.uniform(-3, 10, (n_corners, 2))
    g = AcgGraph()
    pids = [g.add_pose_node(poses[0])]
    for a, b in zip(poses[:-1], poses[1:]):
        start = Pose2(*(b.as_array() + rng.normal(0, noise, 3)))
        pids.append(g.add_pose_node(start, None, a.between(b), ODO_INFO))
    prior = PriorGraph(corners, [(i, i + 1) for i in range(n_corners - 1)])
    prior_ids = g.add_prior(prior, None, 0.5)
    for k in prior_ids:
        g.priors[k] = g.priors[k] + rng.normal(0, noise, 2)
    lms = {}
    for r, pid in enumerate(pids):
        for c in rng.choice(n_corners, 3, replace=False):
            z = poses[r].inverse_transform_point(corners[c])
            lid = g.add_landmark(pid, z)
            g.landmarks[lid] = corners[c] + rng.normal(0, noise, 2)
            g.add_link(lid, prior_ids[c])
            lms[lid] = corners[c]
    truth = {"poses": dict(zip(pids, poses)), "landmarks": lms, "priors": dict(zip(prior_ids, corners))}
    return g, truth


# -- rasters ---------------------------------------------------------------


def canvas(h=100, w=200):
    return np.full((h, w), 255, np.uint8)


def stroke(img, r0, c0, r1, c1, t):
    """Axis-aligned ink stroke of thickness t centred on the segment (r0,c0)-(r1,c1)."""
    lo = (t - 1) // 2
    hi = t - 1 - lo
    img[min(r0, r1) - lo:max(r0, r1) + hi + 1, min(c0, c1) - lo:max(c0, c1) + hi + 1] = 0
    return img


def rectangle(t=3):
    img = canvas()
    for seg in ((20, 30, 20, 170), (80, 30, 80, 170), (20, 30, 80, 30), (20, 170, 80, 170)):
        stroke(img, *seg, t)
    return img


def tee(t=3):
    img = canvas(120, 120)
    stroke(img, 20, 20, 20, 100, t)   # bar
    stroke(img, 20, 60, 100, 60, t)   # stem
    return img


def to_xy(rc, h, px=1.0):
    rc = np.asarray(rc, float)
    return np.column_stack([rc[:, 1], (h - 1) - rc[:, 0]]) * px


def match(nodes, truth, tol):
    d = np.linalg.norm(nodes[:, None, :] - truth[None, :, :], axis=2)
    return np.all(d.min(axis=0) <= tol) and np.all(d.min(axis=1) <= tol)


# -- point clouds -------------------------------------------------------------


def wall(a, b, n):
    t = np.linspace(0.0, 1.0, n, endpoint=False) + 0.5 / n
    return np.asarray(a, float) + t[:, None] * (np.asarray(b, float) - np.asarray(a, float))


def l_shape(spacing=0.05, gap=None):
    """Two 3 m walls meeting at the origin, offset half a spacing so no point sits on a cell edge."""
    n = int(round(3.0 / spacing))
    pts = np.vstack([wall((0, 0), (3, 0), n), wall((0, 0), (0, 3), n)])
    pts = pts + 1e-4
    if gap is not None:
        lo, hi = gap
        keep = ~np.all((pts >= lo) & (pts < hi), axis=1)
        pts = pts[keep]
    return pts


# -- jacobians -----------------------------------------------------------------


def _edge_variables(P: Problem):
    """Per block: residual function and, per side, (variable array, row of each edge)."""
    return [
        (P.odometry_residuals, (P.X, P.od_i), (P.X, P.od_j)),
        (P.observation_residuals, (P.X, P.ob_p), (P.L, P.ob_l)),
        (P.prior_residuals, (P.R, P.pe_a), (P.R, P.pe_b)),
        (P.link_residuals, (P.L, P.lk_l), (P.R, P.lk_p)),
    ]


def max_jacobian_error(P: Problem, step: float = 1e-6) -> float:
    """Largest |J_fd - J| / max(1, |J|) over every edge, side and coordinate (central differences)."""
    worst = 0.0
    for blk, (res_fn, side_a, side_b) in zip(P.blocks(), _edge_variables(P)):
        for e in range(len(blk.e)):
            for (arr, rows), jac in ((side_a, blk.ja), (side_b, blk.jb)):
                row = rows[e]
                for k in range(arr.shape[1]):
                    orig = arr[row, k]
                    arr[row, k] = orig + step
                    rp = res_fn()[e]
                    arr[row, k] = orig - step
                    rm = res_fn()[e]
                    arr[row, k] = orig
                    col = jac[e][:, k]
                    err = np.abs((rp - rm) / (2 * step) - col) / np.maximum(1.0, np.abs(col))
                    worst = max(worst, float(err.max()))
    return worst
