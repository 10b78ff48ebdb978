# cli.py
import argparse
import asyncio
import csv
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np
from sqlalchemy.exc import SQLAlchemyError

from config import config
from database import CellDB, RunDB, close_db, init_db
from errors import (
    ConfigError, DatasetError, IncompleteMatrix, InvalidSpec, ParseError,
    SensorOutsideWorld, WaypointOutsideWorld,
)
from evaluation import (
    CellResult, ate, cell_name, classify_loop, emit_tables, evaluate_merge,
    keyframe_ground_truth, success, trajectory_rows,
)
from experiment import ExperimentConfig, load_config, scan_seed
from fileio import fmt, read_ply, read_pose_csv, write_descriptor_dump, write_keyframe_dump, write_ply, write_pose_csv
from frontend import KeyFrame, OdometryConfig, apply_tunnel_filter, run_odometry, select_keyframes
from geom import PointCloud, Pose3
from graphcore import write_g2o, write_graph_svg
from merge import run_merge_session
from placerec import describe_keyframes
from simworld import (
    Trajectory, build_world, degrade_odometry, integrate_increments, raycast_scan,
    script_trajectories, trajectory_stats,
)

logging.basicConfig(
    level=config.log_level,
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    stream=sys.stdout
)
logger = logging.getLogger(__name__)

ODOMETRY_MODES = ("unconstrained", "kinematic")
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CELLS = 0, 1, 2, 3


# ═══════════════════════════════════════
# DATASET LAYOUT
# ═══════════════════════════════════════

def seed_dir(out: Path, seed: int) -> Path:
    return Path(out) / f"seed_{seed}"


def robot_dir(out: Path, seed: int, robot: int) -> Path:
    return seed_dir(out, seed) / f"robot_{robot}"


@dataclass(eq=False)
class Recording:
    robot: int
    stamps: np.ndarray
    scans: list[PointCloud]
    ground_truth: Trajectory
    wheel: list[Pose3]


def _read_trajectory(path: Path, robot: int) -> Trajectory:
    rows = read_pose_csv(path)
    if any(r != robot for _, r, _ in rows):
        raise DatasetError(f"{path}: rows of another robot")
    return Trajectory(robot, [s for s, _, _ in rows], [p for _, _, p in rows])


def load_recording(out: Path, seed: int, robot: int) -> Recording:
    rdir = robot_dir(out, seed, robot)
    if not rdir.is_dir():
        raise DatasetError(f"no recording for robot {robot} at {rdir}; run simulate first")
    gt = _read_trajectory(rdir / "ground_truth.csv", robot)
    wheel = _read_trajectory(rdir / "wheel.csv", robot)
    if len(wheel) != len(gt):
        raise DatasetError(f"{rdir}: {len(gt)} ground-truth poses but {len(wheel)} wheel poses")
    scans = [read_ply(rdir / "scans" / f"scan_{k:06d}.ply") for k in range(len(gt))]
    increments = [a.between(b) for a, b in zip(wheel.poses[:-1], wheel.poses[1:])]
    return Recording(robot, gt.stamps, scans, gt, increments)


# ═══════════════════════════════════════
# SIMULATE
# ═══════════════════════════════════════

def _write_rows(path: Path, header: list[str], rows: list[list]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """Scans, ground truth and wheel odometry for every robot and seed."""
    written = []
    for seed in cfg.seeds:
        scfg = cfg.for_seed(seed)
        sdir = seed_dir(out, seed)
        world = build_world(scfg.world)
        sdir.mkdir(parents=True, exist_ok=True)
        (sdir / "world.json").write_text(world.serialize() + "\n")

        trajectories = script_trajectories(world, scfg.robots)
        stats_rows = []
        for traj in trajectories:
            rdir = robot_dir(out, seed, traj.robot)
            for k, pose in enumerate(traj.poses):
                cloud = raycast_scan(world, pose, scfg.lidar, scan_seed(seed, traj.robot, k))
                write_ply(rdir / "scans" / f"scan_{k:06d}.ply", cloud)
            write_pose_csv(rdir / "ground_truth.csv", zip(traj.stamps, [traj.robot] * len(traj), traj.poses))
            wheel = integrate_increments(degrade_odometry(traj, scfg.odometry_model), traj.stamps,
                                         traj.robot, traj.poses[0])
            write_pose_csv(rdir / "wheel.csv", zip(wheel.stamps, [traj.robot] * len(wheel), wheel.poses))
            stats = trajectory_stats(traj)
            stats_rows.append([stats.robot, len(traj), fmt(stats.path_length, 6), fmt(stats.duration, 6),
                               fmt(stats.average_speed, 6)])
            written.append(rdir)
            logger.info(f"Seed {seed} robot {traj.robot}: wrote {len(traj)} scans to {rdir}")
        _write_rows(sdir / "trajectories.csv", ["robot", "poses", "path_length", "duration", "average_speed"],
                    stats_rows)
    return written


# ═══════════════════════════════════════
# ODOMETRY
# ═══════════════════════════════════════

def _quartiles(errors: list[float]) -> list[float]:
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return [0.0] * 6
    q = np.percentile(e, [0, 25, 50, 75, 100])
    return [*q.tolist(), float(e.sum())]


def cmd_odometry(cfg: ExperimentConfig, out: Path, modes: tuple[str, ...] = ODOMETRY_MODES) -> Path:
    """Both odometry variants per robot plus the per-robot ATE distribution table."""
    rows = []
    for seed in cfg.seeds:
        for robot in cfg.robot_ids:
            rec = load_recording(out, seed, robot)
            for mode in modes:
                odo_cfg = replace(cfg.frontend.odometry, mode=mode)
                wheel = rec.wheel if mode == "kinematic" else None
                traj = run_odometry(rec.scans, wheel, odo_cfg, stamps=rec.stamps, robot=robot)
                write_pose_csv(robot_dir(out, seed, robot) / f"odometry_{mode}.csv",
                               zip(traj.stamps, [robot] * len(traj), traj.poses))
                report = ate(traj, rec.ground_truth, alignment="first_pose")
                rows.append([seed, robot, mode, *[fmt(v, 6) for v in _quartiles(report.per_pose_errors)],
                             fmt(report.path_length, 6), fmt(report.ratio_max_over_length, 6)])
                logger.info(
                    f"Seed {seed} robot {robot} {mode}: max ATE {report.max:.3f} m over "
                    f"{report.path_length:.1f} m ({100 * report.ratio_max_over_length:.2f}%)"
                )
    path = Path(out) / "odometry_ate.csv"
    _write_rows(path, ["seed", "robot", "mode", "min", "q1", "median", "q3", "max", "sum",
                       "path_length", "ratio_max_over_length"], rows)
    return path


def load_keyframes(cfg: ExperimentConfig, out: Path, seed: int, robot: int) -> tuple[list[KeyFrame], Trajectory]:
    """Keyframes along the stored odometry estimate of the configured mode, tunnel-labelled."""
    mode = cfg.frontend.odometry.mode
    rdir = robot_dir(out, seed, robot)
    estimate_path = rdir / f"odometry_{mode}.csv"
    if not estimate_path.exists():
        raise DatasetError(f"missing {estimate_path}; run odometry first")
    rec = load_recording(out, seed, robot)
    estimate = _read_trajectory(estimate_path, robot)
    if len(estimate) != len(rec.scans):
        raise DatasetError(f"{estimate_path}: {len(estimate)} poses for {len(rec.scans)} scans")
    keyframes = select_keyframes(estimate, rec.scans, cfg.frontend.keyframe_distance, cfg.frontend.odometry.voxel_size)
    keyframes = apply_tunnel_filter(keyframes, cfg.frontend.width_threshold)
    keyframes = describe_keyframes(keyframes, cfg.placerec)
    if cfg.dump_keyframes:
        write_keyframe_dump(rdir / "keyframes", keyframes)
        write_descriptor_dump(rdir / "keyframes" / "descriptors.csv", keyframes,
                              {kf.key: kf.descriptor for kf in keyframes})
    return keyframes, rec.ground_truth


# ═══════════════════════════════════════
# MATRIX
# ═══════════════════════════════════════

@dataclass(eq=False)
class CellTask:
    cfg: ExperimentConfig
    pair: tuple[int, int]
    use_filter: bool
    use_pcm: bool
    keyframes: dict[int, list[KeyFrame]]
    ground_truth: dict[int, Trajectory]
    cell_dir: Path


def _run_cell(task: CellTask, workdir: Path) -> CellResult:
    a, b = task.pair
    kfs = {r: task.keyframes[r] for r in task.pair}
    gt = {r: task.ground_truth[r] for r in task.pair}
    gt_poses = {**keyframe_ground_truth(kfs[a], gt[a]), **keyframe_ground_truth(kfs[b], gt[b])}
    labeler = partial(classify_loop, gt_poses=gt_poses, cfg=task.cfg.eval)

    result = run_merge_session(kfs[a], kfs[b], task.cfg.merge_config(task.use_filter, task.use_pcm), labeler)
    for stage, graph in result.snapshots.items():
        write_g2o(graph, workdir / f"{stage}.g2o")
        if task.cfg.eval.svg:
            write_graph_svg(graph, workdir / f"{stage}.svg")

    reports = evaluate_merge(result.graph, kfs, gt)
    return CellResult(
        pair=task.pair,
        use_filter=task.use_filter,
        use_pcm=task.use_pcm,
        report=result.report.to_dict(),
        ate={r: rep.to_dict() for r, rep in reports.items()},
        success=success(list(reports.values()), task.cfg.eval.success_ratio),
        trajectory_rows=trajectory_rows(result.graph, kfs, gt, reports),
    )


def run_cell(task: CellTask) -> tuple[dict, float]:
    """One matrix cell in a private directory, renamed into place when complete."""
    started = time.perf_counter()
    name = cell_name(task.pair, task.use_filter, task.use_pcm)
    workdir = task.cell_dir.with_name(task.cell_dir.name + ".partial")
    if workdir.exists():
        shutil.rmtree(workdir)
    workdir.mkdir(parents=True)
    try:
        cell = _run_cell(task, workdir)
    except Exception as e:
        logger.error(f"Cell {name} failed: {e!r}", exc_info=True)
        cell = CellResult(pair=task.pair, use_filter=task.use_filter, use_pcm=task.use_pcm,
                          status="failed", error=repr(e))
    data = cell.to_dict()
    (workdir / "cell.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    if task.cell_dir.exists():
        shutil.rmtree(task.cell_dir)
    os.replace(workdir, task.cell_dir)
    elapsed = time.perf_counter() - started
    logger.info(f"Cell {name}: {cell.status} in {elapsed:.1f} s")
    return data, elapsed


def collect_cells(cells_root: Path) -> dict[str, CellResult]:
    cells = {}
    for path in sorted(Path(cells_root).glob("*/*/*/cell.json")):
        if path.parent.name.endswith(".partial"):
            continue
        cell = CellResult.from_dict(json.loads(path.read_text()))
        cells[cell.name] = cell
    return cells


async def store_cells(out: Path, cfg: ExperimentConfig, seed: int, results: list[tuple[dict, float]]):
    """Cell reports and wall-clock timings go to the results store only."""
    await init_db(config.database_url(out))
    try:
        run = await RunDB.create(str(Path(out).resolve()), cfg.config_hash, seed, cfg.optimize.robust)
        for data, elapsed in results:
            cell = await CellDB.create(run.id, tuple(data["pair"]), data["use_filter"], data["use_pcm"],
                                       cfg.optimize.robust)
            await CellDB.save_report(cell.id, data, data["status"], elapsed)
        logger.info(f"Stored {len(results)} cells under run {run.id}")
    finally:
        await close_db()


async def load_stored_cells(out: Path, seed: int) -> dict[str, CellResult]:
    await init_db(config.database_url(out))
    try:
        run = await RunDB.latest(str(Path(out).resolve()), seed)
        if run is None:
            return {}
        cells = [CellResult.from_dict(d) for d in await CellDB.list_reports(run.id)]
        return {c.name: c for c in cells}
    finally:
        await close_db()


def cmd_matrix(cfg: ExperimentConfig, out: Path, jobs: int = 1,
               filters: tuple[bool, ...] = (False, True), pcms: tuple[bool, ...] = (False, True)) -> int:
    """Every robot pair × keyframe regime × PCM setting; returns the number of failed cells."""
    failed = 0
    pairs = list(combinations(cfg.robot_ids, 2))
    for seed in cfg.seeds:
        scfg = cfg.for_seed(seed)
        sdir = seed_dir(out, seed)
        keyframes, ground_truth = {}, {}
        for robot in cfg.robot_ids:
            keyframes[robot], ground_truth[robot] = load_keyframes(scfg, out, seed, robot)

        tasks = [
            CellTask(scfg, pair, f, m, keyframes, ground_truth, sdir / "cells" / cell_name(pair, f, m))
            for pair in pairs for f in filters for m in pcms
        ]
        logger.info(f"Seed {seed}: {len(tasks)} cells over {len(pairs)} pairs, jobs={jobs}")
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(run_cell, tasks))
        else:
            results = [run_cell(t) for t in tasks]
        failed += sum(data["status"] != "ok" for data, _ in results)

        try:
            asyncio.run(store_cells(out, cfg, seed, results))
        except SQLAlchemyError as e:
            logger.warning(f"Results store unavailable, cell JSON files only: {e}")

        cells = collect_cells(sdir / "cells")
        try:
            emit_tables(cells, sdir / "tables", pairs, svg=cfg.eval.svg)
        except IncompleteMatrix as e:
            logger.warning(f"Seed {seed}: tables need the full matrix ({len(e.missing)} cells missing)")
    return failed


def cmd_report(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """Tables from stored cell reports; per-cell JSON files when the store has no run."""
    written = []
    pairs = list(combinations(cfg.robot_ids, 2))
    for seed in cfg.seeds:
        sdir = seed_dir(out, seed)
        try:
            cells = asyncio.run(load_stored_cells(out, seed))
        except SQLAlchemyError as e:
            logger.warning(f"Results store unavailable: {e}")
            cells = {}
        if not cells:
            logger.info(f"Seed {seed}: no stored run, reading cell files")
            cells = collect_cells(sdir / "cells")
        written += emit_tables(cells, sdir / "tables", pairs, svg=cfg.eval.svg)
    return written


# ═══════════════════════════════════════
# ENTRY POINT
# ═══════════════════════════════════════

class UsageParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="cli.py", description="Multi-robot tunnel SLAM experiment runner")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)

    common = UsageParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="experiment TOML file")
    common.add_argument("--seed", type=int, default=None, help="run this seed only")
    common.add_argument("--output", type=Path, default=None, help="output root (overrides config and env)")

    sub.add_parser("simulate", parents=[common], help="generate scans, ground truth and wheel odometry")
    odo = sub.add_parser("odometry", parents=[common], help="run both odometry variants and compare ATE")
    odo.add_argument("--mode", choices=["both", *ODOMETRY_MODES], default="both")
    matrix = sub.add_parser("matrix", parents=[common], help="run the pairwise merge matrix")
    matrix.add_argument("--jobs", type=int, default=config.JOBS)
    matrix.add_argument("--filter", choices=["all", "tunnel"], default=None)
    matrix.add_argument("--pcm", choices=["on", "off"], default=None)
    matrix.add_argument("--robust", choices=["none", "gnc"], default=None)
    report = sub.add_parser("report", parents=[common], help="regenerate tables from stored cell reports")
    report.add_argument("--robust", choices=["none", "gnc"], default=None)
    return parser


def resolve_output(args, cfg: ExperimentConfig) -> Path:
    return Path(args.output or cfg.output_dir or config.OUTPUT_DIR)


def apply_overrides(args, cfg: ExperimentConfig) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seeds=[args.seed])
    if getattr(args, "robust", None):
        cfg = cfg.with_robust(args.robust)
    return cfg


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(args, load_config(args.config))
        out = resolve_output(args, cfg)
        if args.command == "simulate":
            cmd_simulate(cfg, out)
        elif args.command == "odometry":
            cmd_odometry(cfg, out, ODOMETRY_MODES if args.mode == "both" else (args.mode,))
        elif args.command == "matrix":
            if args.jobs < 1:
                raise ConfigError("jobs", "must be >= 1")
            filters = (False, True) if args.filter is None else (args.filter == "tunnel",)
            pcms = (False, True) if args.pcm is None else (args.pcm == "on",)
            if cmd_matrix(cfg, out, args.jobs, filters, pcms):
                logger.error("Matrix finished with failed cells")
                return EXIT_CELLS
        elif args.command == "report":
            cmd_report(cfg, out)
    except (ConfigError, InvalidSpec, WaypointOutsideWorld, SensorOutsideWorld) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (DatasetError, ParseError, IncompleteMatrix, OSError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
