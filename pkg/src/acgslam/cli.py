"""Command-line experiment driver.

Every subcommand writes its outputs under ``--out`` together with a
``manifest.json`` (configuration, seed, library versions, wall times).
Everything except the manifest is byte-identical for a fixed seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from . import __version__
from .evalstats import ABLATION_SCHEDULES, AXES, RunConfig, ablate, make_pipeline, evaluate, rows_to_csv, sweep
from .gridnav import DEFAULT_RESOLUTION, fuse, path_length, plan, write_grid, write_path
from .graph import AcgGraph, GraphError, deserialize, serialize
from .pgm import PgmError
from .prior import RasterMap, raster_to_prior
from .simworld import ScenarioError, build_scenario, load_scenario_spec, simulate
from .solver import DEFAULT_SCHEDULE, SCOPE_ALL, SCOPE_LINKS_PRIORS, IterationTrace, Schedule

log = logging.getLogger("acgslam")


class CliError(Exception):
    """Reported as one ``acgslam: error: <kind>: <message>`` line."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# -- helpers -----------------------------------------------------------------


def _versions() -> dict:
    out = {"python": platform.python_version(), "acgslam": __version__}
    for dist in ("numpy", "scipy", "scikit-image"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _manifest(out: Path, args, extra: dict | None = None) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"command": args.command, "config": cfg, "seed": getattr(args, "seed", None),
           "versions": _versions(), "created": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    doc.update(extra or {})
    _write(out / "manifest.json", json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _scenario(args):
    spec = load_scenario_spec(args.scenario)
    return build_scenario(spec, args.seed)


def _config(args, **over) -> RunConfig:
    try:
        Schedule.parse(args.schedule)
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    cfg = RunConfig(threshold=args.threshold, fraction=args.fraction, schedule=args.schedule,
                    seed=args.seed if args.seed is not None else 0,
                    robust_scope=getattr(args, "scope", SCOPE_LINKS_PRIORS))
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg


def _run_pipeline(args, steps_limit=None):
    sc = _scenario(args)
    seed = sc.seed
    steps = simulate(sc.world, sc.trajectory, sc.noise, seed)
    if steps_limit is not None:
        steps = steps[:steps_limit]
    cfg = _config(args, seed=seed)
    pipe = make_pipeline(sc, cfg)
    pipe.run(steps)
    return sc, pipe, cfg


def _outcome_json(outcome) -> str:
    d = asdict(outcome)
    return json.dumps(d, sort_keys=True, indent=1) + "\n"


# -- subcommands -----------------------------------------------------------------


def cmd_extract_prior(args) -> dict:
    path = args.image or args.prior_image
    if path is None:
        raise CliError("usage", "extract-prior needs an image path")
    if not Path(path).exists():
        raise CliError("missing-input", f"{path} does not exist")
    prior = raster_to_prior(RasterMap.from_pgm(path, args.pixel_size))
    g = AcgGraph()
    g.add_prior(prior, None, args.fraction)
    out = _out_dir(args)
    _write(out / "prior.acg", serialize(g))
    print(f"{len(prior.nodes)} nodes, {len(prior.edges)} edges")
    return {"nodes": len(prior.nodes), "edges": len(prior.edges)}


def cmd_simulate(args) -> dict:
    sc = _scenario(args)
    steps = simulate(sc.world, sc.trajectory, sc.noise, sc.seed)
    out = _out_dir(args)
    buf = io.StringIO()
    for k, s in enumerate(steps):
        d = s.odometry_delta
        buf.write(json.dumps({"step": k, "odometry": [d.x, d.y, d.theta],
                              "information": s.odometry_information.tolist(),
                              "scan": np.round(s.scan_points, 9).tolist()}) + "\n")
    _write(out / "steps.jsonl", buf.getvalue())
    truth = io.StringIO()
    w = csv.writer(truth, lineterminator="\n")
    w.writerow(["step", "x", "y", "theta"])
    for k, p in enumerate(sc.trajectory):
        w.writerow([k, f"{p.x:.12g}", f"{p.y:.12g}", f"{p.theta:.12g}"])
    _write(out / "truth.csv", truth.getvalue())
    g = AcgGraph()
    g.add_prior(sc.prior.graph, sc.anchor_pairs() if sc.anchors else None, args.fraction)
    _write(out / "prior.acg", serialize(g))
    world = AcgGraph()
    for a, b in sc.world.walls:
        ia, ib = world.add_prior_node(a), world.add_prior_node(b)
        world.add_prior_edge(ia, ib, np.asarray(b) - np.asarray(a), np.eye(2))
    write_grid(fuse(world, args.resolution), out / "world.pgm")
    print(f"{len(steps)} steps")
    return {"steps": len(steps), "seed": sc.seed}


def cmd_run(args) -> dict:
    sc, pipe, cfg = _run_pipeline(args)
    out = _out_dir(args)
    trace = IterationTrace()
    for r in pipe.reports:
        trace.extend(r.trace)
    _write(out / "trace.csv", trace.to_csv())
    _write(out / "steps.jsonl", "".join(r.to_json() + "\n" for r in pipe.reports))
    _write(out / "graph.acg", serialize(pipe.graph))
    outcome, _, _ = evaluate(sc, pipe, cfg.tolerance)
    _write(out / "outcome.json", _outcome_json(outcome))
    print(f"steps {len(pipe.reports)} outliers {outcome.outlier_pct:.1f}% success {outcome.success} "
          f"prior_rmse {outcome.prior_rmse:.3f} pose_rmse {outcome.pose_rmse:.3f}")
    return {"seed": sc.seed, "step_wall_times": [r.wall_time for r in pipe.reports]}


def _parse_values(axis: str, text: str) -> list:
    parts = [p for p in (text.split("|") if axis == "kernel_schedule" else text.split(",")) if p.strip()]
    if not parts:
        raise CliError("config", "no sweep values")
    if axis == "kernel_schedule":
        return [p.strip() for p in parts]
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise CliError("config", f"sweep values must be numbers: {text!r}") from None


def cmd_sweep(args) -> dict:
    values = _parse_values(args.axis, args.values)
    cfg = _config(args, incremental=args.incremental)
    t0 = time.perf_counter()
    rows = sweep(load_scenario_spec(args.scenario), args.axis, values, args.repeats,
                 args.seed if args.seed is not None else 0, cfg, args.jobs)
    out = _out_dir(args)
    _write(out / "sweep.csv", rows_to_csv(rows))
    failed = sum(bool(r.outcome.error) for r in rows)
    print(f"{len(rows)} runs, {failed} failed")
    return {"wall_time": time.perf_counter() - t0, "failed_runs": failed}


def cmd_ablate(args) -> dict:
    sc = _scenario(args)
    cfg = _config(args, seed=sc.seed)
    results = ablate(sc, cfg)
    out = _out_dir(args)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["schedule", "outlier_pct", "success", "prior_rmse", "pose_rmse"])
    for sched, res in results:
        o = res.outcome
        w.writerow([sched, f"{o.outlier_pct:.9g}", int(o.success), f"{o.prior_rmse:.9g}", f"{o.pose_rmse:.9g}"])
        _write(out / f"trace_{sched.replace(':', '').replace(',', '_')}.csv", res.trace.to_csv())
    _write(out / "kernels.csv", buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return {"seed": sc.seed, "schedules": list(ABLATION_SCHEDULES)}


def _graph_from_args(args):
    if args.graph:
        if not Path(args.graph).exists():
            raise CliError("missing-input", f"{args.graph} does not exist")
        return deserialize(Path(args.graph).read_text(encoding="utf-8")), None
    sc, pipe, _ = _run_pipeline(args, args.steps)
    return pipe.graph, (sc, pipe)


def cmd_render(args) -> dict:
    g, _ = _graph_from_args(args)
    grid = fuse(g, args.resolution)
    out = _out_dir(args)
    write_grid(grid, out / "grid.pgm")
    print(f"grid {grid.shape[1]}x{grid.shape[0]} at {grid.resolution} m")
    return {"free_space": grid.metadata.get("free_space")}


def cmd_plan(args) -> dict:
    g, ctx = _graph_from_args(args)
    sc = ctx[0] if ctx else None
    start = np.array(args.start) if args.start else None
    goal = np.array(args.goal) if args.goal else None
    if sc is not None:
        if start is None:
            start = np.asarray(sc.spec.get("start", sc.trajectory[0].translation), dtype=float)
        if goal is None and sc.goal is not None:
            goal = sc.goal
    if start is None or goal is None:
        raise CliError("usage", "plan needs --start and --goal")
    grid = fuse(g, args.resolution)
    path = plan(grid, start, goal)
    out = _out_dir(args)
    write_grid(grid, out / "grid.pgm")
    if path is None:
        _write(out / "path.txt", "")
        print("no-path")
        return {"path": None}
    write_path(path, out / "path.txt")
    print(f"path {len(path)} points, length {path_length(path):.3f} m")
    return {"path_length": path_length(path)}


def cmd_dump_graph(args) -> dict:
    g, _ = _graph_from_args(args)
    out = _out_dir(args)
    _write(out / "graph.acg", serialize(g))
    print(json.dumps(g.summary(), sort_keys=True))
    return {}


# -- parser ------------------------------------------------------------------


def _common(p, *, run_flags=True):
    p.add_argument("--scenario", default="standard", help="bundled scenario name or JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--fraction", type=float, default=0.5, help="prior-edge eigenvalue fraction")
    if run_flags:
        p.add_argument("--threshold", type=float, default=2.0, help="link distance threshold (m)")
        p.add_argument("--schedule", default=DEFAULT_SCHEDULE, help='kernel schedule, e.g. "huber:10,dcs:20"')
        p.add_argument("--scope", choices=(SCOPE_LINKS_PRIORS, SCOPE_ALL), default=SCOPE_LINKS_PRIORS,
                       help="edges the robust kernel applies to")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="acgslam", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"acgslam {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-prior", help="emergency-map raster to prior graph")
    p.add_argument("image", nargs="?")
    p.add_argument("--prior-image", default=None)
    p.add_argument("--pixel-size", type=float, default=0.05, help="meters per pixel")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_extract_prior)

    p = sub.add_parser("simulate", help="generate odometry and scans for a scenario")
    _common(p, run_flags=False)
    p.add_argument("--resolution", type=float, default=DEFAULT_RESOLUTION)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("run", help="incremental pipeline on a scenario")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="parameter sweep with repeats")
    _common(p)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", required=True, help="comma list; '|' separated for kernel_schedule")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--incremental", action="store_true", help="optimise after every step instead of once")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate-kernels", help="one recorded graph under four kernel schedules")
    _common(p)
    p.set_defaults(func=cmd_ablate)

    for name, func, help_ in (("render", cmd_render, "fused occupancy grid as PGM"),
                              ("plan", cmd_plan, "A* on the fused grid"),
                              ("dump-graph", cmd_dump_graph, "write the ACG exchange file")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--graph", default=None, help="exchange file instead of running a scenario")
        p.add_argument("--steps", type=int, default=None, help="only the first N steps")
        p.add_argument("--resolution", type=float, default=DEFAULT_RESOLUTION)
        if name == "plan":
            p.add_argument("--start", type=float, nargs=2, metavar=("X", "Y"))
            p.add_argument("--goal", type=float, nargs=2, metavar=("X", "Y"))
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("ACG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    t0 = time.perf_counter()
    try:
        extra = args.func(args) or {}
        if hasattr(args, "out"):
            extra["wall_time_total"] = time.perf_counter() - t0
            _manifest(_out_dir(args), args, extra)
    except CliError as exc:
        print(f"acgslam: error: {exc.kind}: {exc}", file=sys.stderr)
        return 2
    except (ScenarioError, GraphError, PgmError) as exc:
        print(f"acgslam: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"acgslam: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
