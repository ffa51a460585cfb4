"""Run metrics, parameter sweeps and Welch's unequal-variance t-test."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .frontend import DEFAULT_CELL_SIZE, Pipeline, StepReport
from .graph import DEFAULT_EIGENVALUE_FRACTION, AcgGraph, LinkCandidatePolicy
from .simworld import Scenario, build_scenario, load_scenario_spec, outlier_fraction, simulate
from .solver import DEFAULT_SCHEDULE, SCOPE_LINKS_PRIORS, IterationTrace, optimize

log = logging.getLogger(__name__)

SUCCESS_TOLERANCE = 1.0
AXES = ("outlier_threshold", "eigenvalue_fraction", "kernel_schedule")
ABLATION_SCHEDULES = ("none:30", "huber:30", "dcs:30", "huber:10,dcs:20")
CSV_HEADER = ["value", "repeat", "outlier_pct", "success", "prior_rmse", "pose_rmse"]


@dataclass(frozen=True)
class RunOutcome:
    outlier_pct: float
    success: bool
    prior_rmse: float
    pose_rmse: float
    error: str = ""

    def __post_init__(self):
        if self.prior_rmse < 0 or self.pose_rmse < 0:
            raise ValueError("rmse must be non-negative")

    @classmethod
    def failed(cls, message: str) -> "RunOutcome":
        return cls(math.nan, False, math.inf, math.inf, message)


@dataclass
class Oracle:
    """Ground-truth position of every prior node that has a true corner."""

    prior_truth: dict

    @classmethod
    def from_scenario(cls, scenario: Scenario, prior_ids: Sequence[int]) -> "Oracle":
        truth = {}
        for i, pid in enumerate(prior_ids):
            c = scenario.prior.correspondence[i]
            if c is not None:
                truth[pid] = scenario.world.true_corners[c].copy()
        return cls(truth)


def prior_errors(graph: AcgGraph, oracle: Oracle) -> np.ndarray:
    if not oracle.prior_truth:
        return np.zeros(0)
    ids = sorted(oracle.prior_truth)
    est = np.array([graph.priors[i] for i in ids])
    ref = np.array([oracle.prior_truth[i] for i in ids])
    return np.linalg.norm(est - ref, axis=1)


def judge_success(graph: AcgGraph, oracle: Oracle, tol: float = SUCCESS_TOLERANCE) -> bool:
    """True when every corresponded prior node lies within ``tol`` of its true corner."""
    err = prior_errors(graph, oracle)
    return bool(np.all(err <= tol))


def rmse(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    return float(np.sqrt(np.mean(np.square(errors)))) if errors.size else 0.0


def prior_rmse(graph: AcgGraph, oracle: Oracle) -> float:
    return rmse(prior_errors(graph, oracle))


def pose_rmse(graph: AcgGraph, true_poses: dict) -> float:
    if not true_poses:
        return 0.0
    return rmse([np.linalg.norm(graph.poses[k].translation - p.translation) for k, p in true_poses.items()])


# -- Welch -----------------------------------------------------------------


def welch_t(a, b) -> tuple[float, float]:
    """Welch t statistic and one-tailed p for H1: mean(a) < mean(b)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 <= 0:
        raise ValueError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    return float(t), float(special.stdtr(df, t))


# -- runs ------------------------------------------------------------------


@dataclass
class RunConfig:
    threshold: float = 2.0
    fraction: float = DEFAULT_EIGENVALUE_FRACTION
    schedule: str = DEFAULT_SCHEDULE
    seed: int = 0
    propagate: bool = True
    incremental: bool = True
    robust_scope: str = SCOPE_LINKS_PRIORS
    cell_size: float = DEFAULT_CELL_SIZE
    tolerance: float = SUCCESS_TOLERANCE


@dataclass
class RunResult:
    scenario: Scenario
    pipeline: Pipeline
    outcome: RunOutcome
    true_poses: dict
    oracle: Oracle
    trace: IterationTrace = field(default_factory=IterationTrace)

    @property
    def graph(self) -> AcgGraph:
        return self.pipeline.graph

    @property
    def reports(self) -> list[StepReport]:
        return self.pipeline.reports


def evaluate(scenario: Scenario, pipeline: Pipeline, tol: float = SUCCESS_TOLERANCE):
    g = pipeline.graph
    true_poses = scenario.true_pose_map(pipeline.pose_ids)
    oracle = Oracle.from_scenario(scenario, pipeline.prior_ids)
    try:
        frac = outlier_fraction(g, scenario.prior, pipeline.prior_ids, true_poses, scenario.world)
    except ValueError:
        frac = math.nan
    outcome = RunOutcome(100.0 * frac, judge_success(g, oracle, tol), prior_rmse(g, oracle),
                         pose_rmse(g, true_poses))
    return outcome, true_poses, oracle


def make_pipeline(scenario: Scenario, config: RunConfig) -> Pipeline:
    anchors = scenario.anchor_pairs() if scenario.anchors else None
    return Pipeline(scenario.prior.graph, anchors, eigenvalue_fraction=config.fraction,
                    policy=LinkCandidatePolicy(config.threshold), schedule=config.schedule,
                    initial_pose=scenario.trajectory[0], cell_size=config.cell_size,
                    propagate=config.propagate, robust_scope=config.robust_scope,
                    optimize_each_step=config.incremental)


def run_scenario(scenario: Scenario, config: RunConfig = RunConfig(), steps=None) -> RunResult:
    """Simulate (unless ``steps`` is given) and run the full pipeline."""
    if steps is None:
        steps = simulate(scenario.world, scenario.trajectory, scenario.noise, config.seed)
    pipe = make_pipeline(scenario, config)
    pipe.run(steps)
    trace = IterationTrace()
    if not config.incremental:
        trace = pipe.finish()
    else:
        for r in pipe.reports:
            trace.extend(r.trace)
    outcome, true_poses, oracle = evaluate(scenario, pipe, config.tolerance)
    return RunResult(scenario, pipe, outcome, true_poses, oracle, trace)


def run_seed(spec: dict, seed: int, config: RunConfig) -> RunResult:
    scenario = build_scenario(spec, seed)
    return run_scenario(scenario, replace(config, seed=seed))


def ablate(scenario: Scenario, config: RunConfig = RunConfig(), schedules=ABLATION_SCHEDULES, steps=None):
    """Optimise one recorded graph under each schedule; returns [(schedule, RunResult)]."""
    if steps is None:
        steps = simulate(scenario.world, scenario.trajectory, scenario.noise, config.seed)
    base = make_pipeline(scenario, replace(config, incremental=False))
    base.run(steps)
    recorded = base.graph.copy()
    out = []
    for sched in schedules:
        pipe = make_pipeline(scenario, replace(config, incremental=False, schedule=sched))
        pipe.graph, pipe.pose_ids, pipe.prior_ids = recorded.copy(), list(base.pose_ids), list(base.prior_ids)
        trace = optimize(pipe.graph, sched, config.robust_scope)
        outcome, true_poses, oracle = evaluate(scenario, pipe, config.tolerance)
        out.append((sched, RunResult(scenario, pipe, outcome, true_poses, oracle, trace)))
    return out


# -- sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    value: object
    repeat: int
    outcome: RunOutcome


def derive_seed(master: int, repeat: int) -> int:
    """Per-repeat seed, shared by every swept value (common random numbers)."""
    return int(np.random.SeedSequence([master, repeat]).generate_state(1)[0])


def _configure(config: RunConfig, axis: str, value) -> RunConfig:
    if axis == "outlier_threshold":
        return replace(config, threshold=float(value))
    if axis == "eigenvalue_fraction":
        return replace(config, fraction=float(value))
    return replace(config, schedule=str(value))


def _sweep_job(args) -> SweepRow:
    spec, axis, value, repeat, master, config = args
    seed = derive_seed(master, repeat)
    try:
        out = run_seed(spec, seed, _configure(config, axis, value)).outcome
    except Exception as exc:  # noqa: BLE001 - a failed run is a data point
        log.warning("run value=%s repeat=%d failed: %s", value, repeat, exc)
        out = RunOutcome.failed(f"{type(exc).__name__}: {exc}")
    return SweepRow(value, repeat, out)


def sweep(scenario, axis: str, values: Sequence, repeats: int = 1, seed: int = 0,
          config: Optional[RunConfig] = None, jobs: int = 1) -> list[SweepRow]:
    """One pipeline run per (value, repeat); rows ordered by value then repeat."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if not len(values):
        raise ValueError("no sweep values")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    spec = scenario if isinstance(scenario, dict) else load_scenario_spec(scenario)
    config = config or RunConfig()
    jobs_args = [(spec, axis, v, r, seed, config) for v in values for r in range(repeats)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            rows = list(ex.map(_sweep_job, jobs_args))
    else:
        rows = [_sweep_job(a) for a in jobs_args]
    return rows


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        o = r.outcome
        w.writerow([r.value, r.repeat, _fmt(o.outlier_pct), int(o.success), _fmt(o.prior_rmse), _fmt(o.pose_rmse)])
    return buf.getvalue()


def group_means(rows: Sequence[SweepRow], field_name: str = "prior_rmse") -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r.value, []).append(getattr(r.outcome, field_name))
    return {k: float(np.mean(v)) for k, v in out.items()}
