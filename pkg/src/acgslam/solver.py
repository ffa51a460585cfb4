"""Robust sparse Gauss-Newton back end for the auto-complete graph.

Each iteration linearises every edge at the current estimate, folds the
robust kernel in as an IRLS weight on the edge information, solves the
damped normal equations with a sparse factorisation and applies the
increment in place.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from .geometry import Pose2
from .graph import AcgGraph, GraphError

log = logging.getLogger(__name__)

DAMPING = 1e-6
KERNEL_KINDS = ("none", "huber", "dcs", "geman_mcclure")
SCOPE_LINKS_PRIORS = "links+priors"
SCOPE_ALL = "all"


# -- kernels -------------------------------------------------------------------


def huber_rho(x, k: float):
    """Huber cost: quadratic up to ``k``, linear beyond."""
    if k <= 0:
        raise ValueError("k must be positive")
    a = np.abs(x)
    return np.where(a <= k, 0.5 * np.square(x), k * (a - 0.5 * k))


def huber_weight(x, k: float):
    a = np.abs(x)
    return np.where(a <= k, 1.0, k / np.maximum(a, 1e-300))


def dcs_scale(chi2, phi: float):
    """Dynamic covariance scaling factor min(1, 2 phi / (phi + chi2))."""
    if phi <= 0:
        raise ValueError("phi must be positive")
    return np.minimum(1.0, 2.0 * phi / (phi + np.asarray(chi2, dtype=float)))


def gm_rho(x, c: float):
    x2 = np.square(x)
    return 0.5 * x2 / (1.0 + x2 / (c * c))


def gm_weight(x, c: float):
    """Geman-McClure IRLS weight c^2 / (c^2 + x^2)^2."""
    if c <= 0:
        raise ValueError("c must be positive")
    c2 = c * c
    return c2 / np.square(c2 + np.square(x))


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "none"
    param: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel {self.kind!r}")
        if not self.param > 0:
            raise ValueError("kernel parameter must be positive")

    def weight(self, chi2: np.ndarray) -> np.ndarray:
        """Factor applied to the edge information, from per-edge chi^2."""
        if self.kind == "none":
            return np.ones_like(chi2)
        x = np.sqrt(chi2)
        if self.kind == "huber":
            return huber_weight(x, self.param)
        if self.kind == "dcs":
            return np.square(dcs_scale(chi2, self.param))
        # c^2 * gm_weight is psi(x)/x of gm_rho: full weight at zero residual for any c
        return self.param**2 * gm_weight(x, self.param)

    def robust_chi2(self, chi2: np.ndarray) -> np.ndarray:
        if self.kind == "none":
            return chi2
        x = np.sqrt(chi2)
        if self.kind == "huber":
            return 2.0 * huber_rho(x, self.param)
        if self.kind == "dcs":
            return np.square(dcs_scale(chi2, self.param)) * chi2
        return 2.0 * gm_rho(x, self.param)

    def __str__(self) -> str:
        return self.kind if self.param == 1.0 else f"{self.kind}({self.param:g})"


_ALIASES = {"gm": "geman_mcclure", "geman-mcclure": "geman_mcclure", "german_mclure": "geman_mcclure"}


@dataclass
class Schedule:
    stages: list[tuple[KernelSpec, int]] = field(default_factory=list)

    def __post_init__(self):
        for kernel, count in self.stages:
            if count < 1:
                raise ValueError("stage iteration counts must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """Parse ``"huber:10,dcs:20"``; a kernel parameter goes in brackets, ``dcs(2):20``."""
        stages = []
        for item in text.split(","):
            item = item.strip()
            if not item:
                continue
            try:
                name, count = item.rsplit(":", 1)
                param = 1.0
                if "(" in name:
                    name, rest = name.split("(", 1)
                    param = float(rest.rstrip(")"))
                name = _ALIASES.get(name.strip().lower(), name.strip().lower())
                stages.append((KernelSpec(name, param), int(count)))
            except ValueError as exc:
                raise ValueError(f"bad schedule item {item!r}: {exc}") from None
        if not stages:
            raise ValueError("empty schedule")
        return cls(stages)

    @property
    def total_iterations(self) -> int:
        return sum(n for _, n in self.stages)

    def __str__(self) -> str:
        parts = []
        for k, n in self.stages:
            name = k.kind if k.param == 1.0 else f"{k.kind}({k.param:g})"
            parts.append(f"{name}:{n}")
        return ",".join(parts)


DEFAULT_SCHEDULE = "huber:10,dcs:20"


def default_schedule() -> Schedule:
    return Schedule.parse(DEFAULT_SCHEDULE)


@dataclass
class IterationRecord:
    iteration: int
    stage: str
    mean_error: float
    max_correction: float


class IterationTrace(list):
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "stage", "mean_error", "max_correction"])
        for r in self:
            w.writerow([r.iteration, r.stage, f"{r.mean_error:.12g}", f"{r.max_correction:.12g}"])
        return buf.getvalue()

    def stage_errors(self, label: str) -> np.ndarray:
        return np.array([r.mean_error for r in self if r.stage == label])


class SingularSystemError(GraphError):
    def __init__(self, message: str, components=None):
        super().__init__(message)
        self.components = components or []


# -- linearisation ------------------------------------------------------------


def _wrap(a):
    return np.mod(a + np.pi, 2 * np.pi) - np.pi


@dataclass
class _Block:
    """Linearised edges of one type; endpoints A and B."""

    e: np.ndarray  # (E, m)
    ja: np.ndarray  # (E, m, da)
    jb: np.ndarray  # (E, m, db)
    info: np.ndarray  # (E, m, m)
    off_a: np.ndarray  # (E,) variable offset or -1 when fixed
    off_b: np.ndarray
    robust: bool


class Problem:
    """Array view of a graph for fast repeated linearisation."""

    def __init__(self, graph: AcgGraph, robust_scope: str = SCOPE_LINKS_PRIORS):
        if robust_scope not in (SCOPE_LINKS_PRIORS, SCOPE_ALL):
            raise ValueError(f"unknown robust scope {robust_scope!r}")
        self.graph = graph
        self.scope = robust_scope
        self.pose_ids = sorted(graph.poses)
        self.lm_ids = sorted(graph.landmarks)
        self.pr_ids = sorted(graph.priors)
        prow = {k: r for r, k in enumerate(self.pose_ids)}
        lrow = {k: r for r, k in enumerate(self.lm_ids)}
        rrow = {k: r for r, k in enumerate(self.pr_ids)}
        self.X = np.array([graph.poses[k].as_array() for k in self.pose_ids]).reshape(-1, 3)
        self.L = np.array([graph.landmarks[k] for k in self.lm_ids], dtype=float).reshape(-1, 2)
        self.R = np.array([graph.priors[k] for k in self.pr_ids], dtype=float).reshape(-1, 2)

        off = 0
        self.pose_off = np.full(len(self.pose_ids), -1)
        for r, k in enumerate(self.pose_ids):
            if k not in graph.fixed:
                self.pose_off[r] = off
                off += 3
        self.lm_off = off + 2 * np.arange(len(self.lm_ids))
        off += 2 * len(self.lm_ids)
        self.pr_off = off + 2 * np.arange(len(self.pr_ids))
        off += 2 * len(self.pr_ids)
        self.n = off

        oe = graph.odometry_edges
        self.od_i = np.array([prow[e.i] for e in oe], dtype=int)
        self.od_j = np.array([prow[e.j] for e in oe], dtype=int)
        self.od_z = np.array([e.measurement.as_array() for e in oe]).reshape(-1, 3)
        self.od_info = np.array([e.information for e in oe]).reshape(-1, 3, 3)
        ob = graph.observation_edges
        self.ob_p = np.array([prow[e.pose] for e in ob], dtype=int)
        self.ob_l = np.array([lrow[e.landmark] for e in ob], dtype=int)
        self.ob_z = np.array([e.measurement for e in ob]).reshape(-1, 2)
        self.ob_info = np.array([e.information for e in ob]).reshape(-1, 2, 2)
        pe = graph.prior_edges
        self.pe_a = np.array([rrow[e.a] for e in pe], dtype=int)
        self.pe_b = np.array([rrow[e.b] for e in pe], dtype=int)
        self.pe_z = np.array([e.measurement for e in pe]).reshape(-1, 2)
        self.pe_info = np.array([e.information for e in pe]).reshape(-1, 2, 2)
        lk = graph.link_edges
        self.lk_l = np.array([lrow[e.landmark] for e in lk], dtype=int)
        self.lk_p = np.array([rrow[e.prior] for e in lk], dtype=int)
        self.lk_info = np.array([e.information for e in lk]).reshape(-1, 2, 2)

    @property
    def n_edges(self) -> int:
        return len(self.od_i) + len(self.ob_p) + len(self.pe_a) + len(self.lk_l)

    # residuals -------------------------------------------------------------

    def odometry_residuals(self, X=None):
        X = self.X if X is None else X
        xi, xj, z = X[self.od_i], X[self.od_j], self.od_z
        th = xi[:, 2]
        c, s = np.cos(th), np.sin(th)
        dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
        q0 = c * dx + s * dy - z[:, 0]
        q1 = -s * dx + c * dy - z[:, 1]
        cz, sz = np.cos(z[:, 2]), np.sin(z[:, 2])
        e = np.empty((len(th), 3))
        e[:, 0] = cz * q0 + sz * q1
        e[:, 1] = -sz * q0 + cz * q1
        e[:, 2] = _wrap(xj[:, 2] - th - z[:, 2])
        return e

    def observation_residuals(self, X=None, L=None):
        X = self.X if X is None else X
        L = self.L if L is None else L
        xp, l = X[self.ob_p], L[self.ob_l]
        c, s = np.cos(xp[:, 2]), np.sin(xp[:, 2])
        dx, dy = l[:, 0] - xp[:, 0], l[:, 1] - xp[:, 1]
        return np.column_stack([c * dx + s * dy, -s * dx + c * dy]) - self.ob_z

    def prior_residuals(self, R=None):
        R = self.R if R is None else R
        return R[self.pe_b] - R[self.pe_a] - self.pe_z

    def link_residuals(self, L=None, R=None):
        L = self.L if L is None else L
        R = self.R if R is None else R
        return L[self.lk_l] - R[self.lk_p]

    # jacobians -------------------------------------------------------------

    def odometry_jacobians(self):
        xi, xj, z = self.X[self.od_i], self.X[self.od_j], self.od_z
        n = len(xi)
        th = xi[:, 2]
        c, s = np.cos(th), np.sin(th)
        dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
        a = th + z[:, 2]
        ca, sa = np.cos(a), np.sin(a)
        # Rz^T Ri^T
        m = np.empty((n, 2, 2))
        m[:, 0, 0], m[:, 0, 1], m[:, 1, 0], m[:, 1, 1] = ca, sa, -sa, ca
        cz, sz = np.cos(z[:, 2]), np.sin(z[:, 2])
        d0 = -s * dx + c * dy
        d1 = -c * dx - s * dy
        ja = np.zeros((n, 3, 3))
        jb = np.zeros((n, 3, 3))
        ja[:, :2, :2] = -m
        ja[:, 0, 2] = cz * d0 + sz * d1
        ja[:, 1, 2] = -sz * d0 + cz * d1
        ja[:, 2, 2] = -1.0
        jb[:, :2, :2] = m
        jb[:, 2, 2] = 1.0
        return ja, jb

    def observation_jacobians(self):
        xp, l = self.X[self.ob_p], self.L[self.ob_l]
        n = len(xp)
        c, s = np.cos(xp[:, 2]), np.sin(xp[:, 2])
        dx, dy = l[:, 0] - xp[:, 0], l[:, 1] - xp[:, 1]
        rt = np.empty((n, 2, 2))
        rt[:, 0, 0], rt[:, 0, 1], rt[:, 1, 0], rt[:, 1, 1] = c, s, -s, c
        ja = np.zeros((n, 2, 3))
        ja[:, :, :2] = -rt
        ja[:, 0, 2] = -s * dx + c * dy
        ja[:, 1, 2] = -c * dx - s * dy
        return ja, rt

    def blocks(self) -> list[_Block]:
        robust_all = self.scope == SCOPE_ALL
        out = []
        if len(self.od_i):
            ja, jb = self.odometry_jacobians()
            out.append(_Block(self.odometry_residuals(), ja, jb, self.od_info,
                              self.pose_off[self.od_i], self.pose_off[self.od_j], robust_all))
        if len(self.ob_p):
            ja, jb = self.observation_jacobians()
            out.append(_Block(self.observation_residuals(), ja, jb, self.ob_info,
                              self.pose_off[self.ob_p], self.lm_off[self.ob_l], robust_all))
        eye = np.broadcast_to(np.eye(2), (len(self.pe_a), 2, 2))
        if len(self.pe_a):
            out.append(_Block(self.prior_residuals(), -eye, eye, self.pe_info,
                              self.pr_off[self.pe_a], self.pr_off[self.pe_b], True))
        if len(self.lk_l):
            eye = np.broadcast_to(np.eye(2), (len(self.lk_l), 2, 2))
            out.append(_Block(self.link_residuals(), eye, -eye, self.lk_info,
                              self.lm_off[self.lk_l], self.pr_off[self.lk_p], True))
        return out

    # errors --------------------------------------------------------------------

    def chi2_parts(self):
        """Per-edge chi^2 for each edge type, with a robust-scope flag."""
        robust_all = self.scope == SCOPE_ALL
        parts = []
        if len(self.od_i):
            parts.append((_chi2(self.odometry_residuals(), self.od_info), robust_all))
        if len(self.ob_p):
            parts.append((_chi2(self.observation_residuals(), self.ob_info), robust_all))
        if len(self.pe_a):
            parts.append((_chi2(self.prior_residuals(), self.pe_info), True))
        if len(self.lk_l):
            parts.append((_chi2(self.link_residuals(), self.lk_info), True))
        return parts

    def mean_error(self, kernel: KernelSpec) -> float:
        parts = self.chi2_parts()
        if not parts:
            return 0.0
        total = sum(float(np.sum(kernel.robust_chi2(c) if r else c)) for c, r in parts)
        return total / self.n_edges

    def total_chi2(self) -> float:
        return float(sum(np.sum(c) for c, _ in self.chi2_parts()))

    # update --------------------------------------------------------------------

    def apply(self, dx: np.ndarray) -> float:
        free = self.pose_off >= 0
        max_corr = 0.0
        if free.any():
            idx = self.pose_off[free][:, None] + np.arange(3)
            d = dx[idx]
            self.X[free] += d
            self.X[free, 2] = _wrap(self.X[free, 2])
            max_corr = float(np.max(np.hypot(d[:, 0], d[:, 1])))
        if len(self.lm_ids):
            self.L += dx[self.lm_off[:, None] + np.arange(2)]
        if len(self.pr_ids):
            self.R += dx[self.pr_off[:, None] + np.arange(2)]
        return max_corr

    def write_back(self) -> None:
        g = self.graph
        for r, k in enumerate(self.pose_ids):
            g.poses[k] = Pose2.from_array(self.X[r])
        for r, k in enumerate(self.lm_ids):
            g.landmarks[k] = self.L[r].copy()
        for r, k in enumerate(self.pr_ids):
            g.priors[k] = self.R[r].copy()

    # normal equations ----------------------------------------------------------

    def normal_equations(self, kernel: KernelSpec):
        rows, cols, vals = [], [], []
        b = np.zeros(self.n)
        for blk in self.blocks():
            chi2 = np.einsum("ei,eij,ej->e", blk.e, blk.info, blk.e)
            w = kernel.weight(chi2) if blk.robust else np.ones_like(chi2)
            om = blk.info * w[:, None, None]
            for jx, ox in ((blk.ja, blk.off_a), (blk.jb, blk.off_b)):
                g = np.einsum("eki,ekl,el->ei", jx, om, blk.e)
                _scatter_vec(b, ox, g)
            for jx, ox in ((blk.ja, blk.off_a), (blk.jb, blk.off_b)):
                jt_om = np.einsum("eki,ekl->eil", jx, om)
                for jy, oy in ((blk.ja, blk.off_a), (blk.jb, blk.off_b)):
                    h = np.einsum("eil,elj->eij", jt_om, jy)
                    _scatter_block(rows, cols, vals, ox, oy, h)
        if rows:
            r = np.concatenate(rows)
            c = np.concatenate(cols)
            v = np.concatenate(vals)
        else:
            r = c = np.zeros(0, dtype=int)
            v = np.zeros(0)
        H = sp.coo_matrix((v, (r, c)), shape=(self.n, self.n)).tocsc()
        return H, b

    def components_without_anchor(self) -> list[list[int]]:
        """Node id groups that are not connected to any fixed pose."""
        ids = self.pose_ids + self.lm_ids + self.pr_ids
        base_l = len(self.pose_ids)
        base_r = base_l + len(self.lm_ids)
        a = np.concatenate([self.od_i, self.ob_p, base_r + self.pe_a, base_l + self.lk_l])
        bb = np.concatenate([self.od_j, base_l + self.ob_l, base_r + self.pe_b, base_r + self.lk_p])
        n = len(ids)
        adj = sp.coo_matrix((np.ones(len(a)), (a.astype(int), bb.astype(int))), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        anchored = {labels[r] for r, k in enumerate(self.pose_ids) if k in self.graph.fixed}
        groups: dict[int, list[int]] = {}
        for i, lab in enumerate(labels):
            if lab not in anchored:
                groups.setdefault(int(lab), []).append(ids[i])
        return list(groups.values())


def _chi2(e, info):
    return np.einsum("ei,eij,ej->e", e, info, e)


def _scatter_vec(b, off, g):
    mask = off >= 0
    if not mask.any():
        return
    d = g.shape[1]
    idx = off[mask][:, None] + np.arange(d)
    np.add.at(b, idx.ravel(), g[mask].ravel())


def _scatter_block(rows, cols, vals, off_x, off_y, h):
    mask = (off_x >= 0) & (off_y >= 0)
    if not mask.any():
        return
    dx, dy = h.shape[1], h.shape[2]
    ri = off_x[mask][:, None, None] + np.arange(dx)[None, :, None]
    ci = off_y[mask][:, None, None] + np.arange(dy)[None, None, :]
    ri, ci = np.broadcast_arrays(ri, ci)
    rows.append(ri.ravel())
    cols.append(ci.ravel())
    vals.append(h[mask].ravel())


def solve_step(problem: Problem, kernel: KernelSpec, damping: float = DAMPING) -> np.ndarray:
    H, b = problem.normal_equations(kernel)
    A = (H + damping * sp.identity(problem.n, format="csc")).tocsc()
    try:
        dx = splu(A).solve(-b)
    except RuntimeError as exc:
        comps = problem.components_without_anchor()
        raise SingularSystemError(f"singular normal system: {exc}; unanchored components: {comps}", comps) from None
    if not np.all(np.isfinite(dx)):
        comps = problem.components_without_anchor()
        raise SingularSystemError(f"non-finite increment; unanchored components: {comps}", comps)
    return dx


def optimize(graph: AcgGraph, schedule: Schedule | str | None = None, robust_scope: str = SCOPE_LINKS_PRIORS,
             damping: float = DAMPING, start_iteration: int = 1) -> IterationTrace:
    """Run every stage of ``schedule`` on ``graph``; estimates are updated in place."""
    if schedule is None:
        schedule = default_schedule()
    elif isinstance(schedule, str):
        schedule = Schedule.parse(schedule)
    if not graph.fixed:
        raise GraphError("graph has no gauge-fixed node")
    problem = Problem(graph, robust_scope)
    trace = IterationTrace()
    it = start_iteration
    if problem.n == 0:
        for kernel, count in schedule.stages:
            for _ in range(count):
                trace.append(IterationRecord(it, str(kernel), problem.mean_error(kernel), 0.0))
                it += 1
        return trace
    for kernel, count in schedule.stages:
        for _ in range(count):
            dx = solve_step(problem, kernel, damping)
            corr = problem.apply(dx)
            trace.append(IterationRecord(it, str(kernel), problem.mean_error(kernel), corr))
            it += 1
    problem.write_back()
    log.debug("optimized %d edges over %d iterations, final mean error %.6g", problem.n_edges,
              len(trace), trace[-1].mean_error if trace else math.nan)
    return trace
