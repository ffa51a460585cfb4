"""Incremental pipeline: one partial NDT map per step, then link and optimise."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose2
from .graph import DEFAULT_EIGENVALUE_FRACTION, AcgGraph, LinkCandidatePolicy, PartialMap
from .ndt import build_ndt_grid, detect_corners
from .prior import PriorGraph
from .simworld import StepInput
from .solver import SCOPE_LINKS_PRIORS, IterationTrace, Problem, Schedule, default_schedule, optimize

log = logging.getLogger(__name__)

DEFAULT_CELL_SIZE = 0.5
DEFAULT_NEIGHBORHOOD = 2


class StepError(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


@dataclass
class CorrectionAccumulator:
    """World-frame correction that maps dead-reckoned poses onto the optimised estimate."""

    cumulative: Pose2 = field(default_factory=Pose2.identity)

    def apply(self, raw_pose: Pose2) -> Pose2:
        return self.cumulative.compose(raw_pose)

    def update(self, before: Pose2, after: Pose2) -> Pose2:
        """Fold in the correction that moved the newest pose from ``before`` to ``after``."""
        correction = after.compose(before.inverse())
        self.cumulative = correction.compose(self.cumulative)
        return correction


@dataclass
class StepReport:
    step: int
    poses: int
    landmarks: int
    links: int
    new_landmarks: int
    new_links: int
    initial_chi2: float
    new_odometry_chi2: float
    mean_error_initial: float
    mean_error_final: float
    wall_time: float
    trace: IterationTrace = field(default_factory=IterationTrace, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("trace")
        d.pop("wall_time")
        return json.dumps(d, sort_keys=True)


class Pipeline:
    """Online ACG builder.

    With ``optimize_each_step`` off, steps only grow the graph and
    :meth:`finish` runs one batch optimisation.
    """

    def __init__(self, prior: Optional[PriorGraph] = None, anchor_pairs=None, *,
                 eigenvalue_fraction: float = DEFAULT_EIGENVALUE_FRACTION,
                 policy: Optional[LinkCandidatePolicy] = None, schedule: Schedule | str | None = None,
                 initial_pose: Pose2 = Pose2.identity(), cell_size: float = DEFAULT_CELL_SIZE,
                 neighborhood: int = DEFAULT_NEIGHBORHOOD, propagate: bool = True,
                 robust_scope: str = SCOPE_LINKS_PRIORS, optimize_each_step: bool = True,
                 keep_scans: bool = True):
        self.graph = AcgGraph()
        self.prior_ids: list[int] = []
        if prior is not None:
            self.prior_ids = self.graph.add_prior(prior, anchor_pairs, eigenvalue_fraction)
        self.policy = policy or LinkCandidatePolicy()
        if schedule is None:
            schedule = default_schedule()
        self.schedule = Schedule.parse(schedule) if isinstance(schedule, str) else schedule
        self.cell_size = cell_size
        self.neighborhood = neighborhood
        self.propagate = propagate
        self.robust_scope = robust_scope
        self.optimize_each_step = optimize_each_step
        self.keep_scans = keep_scans
        self.accumulator = CorrectionAccumulator()
        self.raw_pose = initial_pose
        self.pose_ids: list[int] = []
        self.reports: list[StepReport] = []
        self.iterations = 0

    @property
    def n_steps(self) -> int:
        return len(self.pose_ids)

    def _predict(self, delta: Pose2) -> Pose2:
        if self.pose_ids:
            self.raw_pose = self.raw_pose.compose(delta)
        return self.accumulator.apply(self.raw_pose) if self.propagate else self.raw_pose

    def step(self, inp: StepInput, policy: Optional[LinkCandidatePolicy] = None,
             schedule: Schedule | str | None = None) -> StepReport:
        k = self.n_steps
        t0 = time.perf_counter()
        g = self.graph
        predicted = self._predict(inp.odometry_delta)
        pts = predicted.transform_point(inp.scan_points) if len(inp.scan_points) else np.zeros((0, 2))
        grid = build_ndt_grid(pts, self.cell_size)
        pm = PartialMap(grid, predicted, inp.scan_points.copy() if self.keep_scans else None)
        if self.pose_ids:
            pid = g.add_pose_node(predicted, pm, inp.odometry_delta, inp.odometry_information)
        else:
            pid = g.add_pose_node(predicted, pm)
        self.pose_ids.append(pid)
        corners = detect_corners(grid, self.neighborhood)
        for c in corners:
            g.add_landmark(pid, predicted.inverse_transform_point(c.position), position=c.position)
        new_links = g.generate_link_edges(policy or self.policy)

        problem = Problem(g, self.robust_scope)
        parts = problem.chi2_parts()
        initial_chi2 = float(sum(np.sum(c) for c, _ in parts))
        new_odo = float(parts[0][0][-1]) if len(problem.od_i) else 0.0
        sched = self.schedule if schedule is None else (Schedule.parse(schedule) if isinstance(schedule, str)
                                                         else schedule)
        trace = IterationTrace()
        mean_initial = problem.mean_error(sched.stages[0][0]) if sched.stages else 0.0
        if self.optimize_each_step:
            before = g.poses[pid]
            try:
                trace = optimize(g, sched, self.robust_scope, start_iteration=self.iterations + 1)
            except Exception as exc:  # noqa: BLE001 - re-raised with the step index
                raise StepError(k, exc) from exc
            self.iterations += len(trace)
            self.accumulator.update(before, g.poses[pid])
        report = StepReport(
            step=k, poses=len(g.poses), landmarks=len(g.landmarks), links=len(g.link_edges),
            new_landmarks=len(corners), new_links=new_links, initial_chi2=initial_chi2,
            new_odometry_chi2=new_odo, mean_error_initial=mean_initial,
            mean_error_final=trace[-1].mean_error if trace else mean_initial,
            wall_time=time.perf_counter() - t0, trace=trace)
        self.reports.append(report)
        log.debug("step %d: %d landmarks (+%d), %d links (+%d)", k, report.landmarks, len(corners),
                  report.links, new_links)
        return report

    def run(self, steps: Sequence[StepInput]) -> list[StepReport]:
        for inp in steps:
            self.step(inp)
        return self.reports

    def finish(self, schedule: Schedule | str | None = None) -> IterationTrace:
        """Batch optimisation of the whole graph (used when steps do not optimise)."""
        trace = optimize(self.graph, schedule or self.schedule, self.robust_scope,
                         start_iteration=self.iterations + 1)
        self.iterations += len(trace)
        return trace


def step(state: Pipeline, inp: StepInput, policy: Optional[LinkCandidatePolicy] = None,
         schedule: Schedule | str | None = None) -> StepReport:
    return state.step(inp, policy, schedule)


def write_reports(reports: Sequence[StepReport], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in reports:
            f.write(r.to_json() + "\n")
