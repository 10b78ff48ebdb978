# evaluation.py
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from errors import ConfigError, IncompleteMatrix, MissingGroundTruth, NoOverlap
from fileio import fmt
from frontend import KeyFrame
from geom import Pose3
from graphcore import Edge, NodeKey, PoseGraph
from simworld import Trajectory

logger = logging.getLogger(__name__)

TABLE_DIGITS = 6


@dataclass
class EvalConfig:
    place_radius: float = 5.0
    max_translation_error: float = 1.0
    max_rotation_error_deg: float = 15.0
    success_ratio: float = 0.01
    svg: bool = False

    def __post_init__(self):
        for key in ("place_radius", "max_translation_error", "max_rotation_error_deg", "success_ratio"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"eval.{key}", "must be > 0")


@dataclass
class AteReport:
    per_pose_errors: list[float]
    max: float
    mean: float
    sum: float
    path_length: float
    ratio_max_over_length: float

    def to_dict(self, with_errors: bool = False) -> dict:
        out = asdict(self)
        if not with_errors:
            out.pop("per_pose_errors")
        return out


# ═══════════════════════════════════════
# ATE
# ═══════════════════════════════════════

def associate(estimated: Trajectory, ground_truth: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-stamp pairs within half the ground-truth sample period."""
    if len(estimated) == 0 or len(ground_truth) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    gt = ground_truth.stamps
    period = float(np.median(np.diff(gt))) if gt.shape[0] > 1 else 0.0
    tol = 0.5 * period if period > 0 else 1e-9
    pos = np.clip(np.searchsorted(gt, estimated.stamps), 1, max(gt.shape[0] - 1, 1))
    left = np.clip(pos - 1, 0, gt.shape[0] - 1)
    right = np.clip(pos, 0, gt.shape[0] - 1)
    nearest = np.where(
        np.abs(gt[left] - estimated.stamps) <= np.abs(gt[right] - estimated.stamps), left, right
    )
    ok = np.abs(gt[nearest] - estimated.stamps) <= tol + 1e-12
    return np.flatnonzero(ok), nearest[ok]


def ate(estimated: Trajectory, ground_truth: Trajectory,
        alignment: Union[str, Pose3] = "first_pose") -> AteReport:
    """Per-pose translation errors; a Pose3 alignment is applied to the estimate as given."""
    est_idx, gt_idx = associate(estimated, ground_truth)
    if est_idx.size == 0:
        raise NoOverlap(f"robot {estimated.robot}: no estimated stamp matches the ground truth")

    if isinstance(alignment, Pose3):
        align = alignment
    elif alignment == "first_pose":
        align = ground_truth.poses[gt_idx[0]].compose(estimated.poses[est_idx[0]].inverse())
    elif alignment == "none":
        align = Pose3.identity()
    else:
        raise ConfigError("eval.alignment", f"unknown alignment {alignment!r}")

    est = np.array([estimated.poses[k].translation for k in est_idx])
    est = align.transform_points(est)
    gt = np.array([ground_truth.poses[k].translation for k in gt_idx])
    errors = np.linalg.norm(est - gt, axis=1)
    length = ground_truth.path_length()
    peak = float(errors.max())
    return AteReport(
        per_pose_errors=errors.tolist(),
        max=peak,
        mean=float(errors.mean()),
        sum=float(errors.sum()),
        path_length=length,
        ratio_max_over_length=peak / length if length > 0 else float("inf"),
    )


def first_pose_alignment(estimated: Trajectory, ground_truth: Trajectory) -> Pose3:
    est_idx, gt_idx = associate(estimated, ground_truth)
    if est_idx.size == 0:
        raise NoOverlap(f"robot {estimated.robot}: no estimated stamp matches the ground truth")
    return ground_truth.poses[gt_idx[0]].compose(estimated.poses[est_idx[0]].inverse())


# ═══════════════════════════════════════
# LOOP CATEGORIES + SUCCESS
# ═══════════════════════════════════════

def classify_loop(edge: Edge, gt_poses: dict[NodeKey, Pose3], cfg: Optional[EvalConfig] = None) -> str:
    cfg = cfg or EvalConfig()
    for key in (edge.frm, edge.to):
        if key not in gt_poses:
            raise MissingGroundTruth(f"no ground-truth pose for keyframe {key}")
    a, b = gt_poses[edge.frm], gt_poses[edge.to]
    if np.linalg.norm(a.translation - b.translation) > cfg.place_radius:
        return "wrong_pr"
    err = a.between(b).inverse().compose(edge.measurement)
    if np.linalg.norm(err.translation) > cfg.max_translation_error \
            or np.degrees(err.rotation_angle()) > cfg.max_rotation_error_deg:
        return "wrong_pcr"
    return "correct"


def success(reports: list[AteReport], ratio: float = 0.01) -> bool:
    if not reports:
        logger.warning("success() over an empty robot set is vacuously true")
        return True
    return all(r.ratio_max_over_length < ratio for r in reports)


def keyframe_ground_truth(keyframes: list[KeyFrame], ground_truth: Trajectory) -> dict[NodeKey, Pose3]:
    """Ground-truth pose of every keyframe, looked up by stamp."""
    stub = Trajectory(ground_truth.robot, [kf.stamp for kf in keyframes], [kf.pose for kf in keyframes])
    est_idx, gt_idx = associate(stub, ground_truth)
    if est_idx.size != len(keyframes):
        raise MissingGroundTruth(f"robot {ground_truth.robot}: {len(keyframes) - est_idx.size} keyframes lack ground truth")
    return {keyframes[e].key: ground_truth.poses[g] for e, g in zip(est_idx, gt_idx)}


def graph_trajectory(graph: PoseGraph, keyframes: list[KeyFrame]) -> Trajectory:
    kfs = [kf for kf in sorted(keyframes, key=lambda k: k.index) if kf.key in graph.nodes]
    robot = keyframes[0].robot if keyframes else 0
    return Trajectory(robot, [kf.stamp for kf in kfs], [graph.nodes[kf.key] for kf in kfs])


def evaluate_merge(graph: PoseGraph, keyframes: dict[int, list[KeyFrame]],
                   ground_truth: dict[int, Trajectory]) -> dict[int, AteReport]:
    """Merged-map ATE: first-pose alignment fitted on the anchor robot, applied to every robot."""
    robots = sorted(keyframes)
    estimates = {r: graph_trajectory(graph, keyframes[r]) for r in robots}
    for r in robots:
        if r not in ground_truth:
            raise MissingGroundTruth(f"no ground-truth trajectory for robot {r}")
    align = first_pose_alignment(estimates[robots[0]], ground_truth[robots[0]])
    return {r: ate(estimates[r], ground_truth[r], align) for r in robots}


# ═══════════════════════════════════════
# MATRIX CELLS + TABLES
# ═══════════════════════════════════════

@dataclass
class CellResult:
    pair: tuple[int, int]
    use_filter: bool
    use_pcm: bool
    status: str = "ok"
    error: Optional[str] = None
    report: dict = field(default_factory=dict)
    ate: dict[int, dict] = field(default_factory=dict)
    success: Optional[bool] = None
    # stamp, robot, estimate xyz, ground-truth xyz, error
    trajectory_rows: list[list[float]] = field(default_factory=list)

    @property
    def name(self) -> str:
        return cell_name(self.pair, self.use_filter, self.use_pcm)

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "use_filter": self.use_filter,
            "use_pcm": self.use_pcm,
            "status": self.status,
            "error": self.error,
            "report": self.report,
            "ate": {str(k): v for k, v in self.ate.items()},
            "success": self.success,
            "trajectory_rows": self.trajectory_rows,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CellResult":
        return cls(
            pair=(int(data["pair"][0]), int(data["pair"][1])),
            use_filter=bool(data["use_filter"]),
            use_pcm=bool(data["use_pcm"]),
            status=data.get("status", "ok"),
            error=data.get("error"),
            report=data.get("report", {}),
            ate={int(k): v for k, v in data.get("ate", {}).items()},
            success=data.get("success"),
            trajectory_rows=data.get("trajectory_rows", []),
        )


def cell_name(pair: tuple[int, int], use_filter: bool, use_pcm: bool) -> str:
    return f"{pair[0]}-{pair[1]}/filter={'on' if use_filter else 'off'}/pcm={'on' if use_pcm else 'off'}"


def trajectory_rows(graph: PoseGraph, keyframes: dict[int, list[KeyFrame]], ground_truth: dict[int, Trajectory],
                    reports: dict[int, AteReport]) -> list[list[float]]:
    robots = sorted(keyframes)
    estimates = {r: graph_trajectory(graph, keyframes[r]) for r in robots}
    align = first_pose_alignment(estimates[robots[0]], ground_truth[robots[0]])
    rows = []
    for r in robots:
        est_idx, gt_idx = associate(estimates[r], ground_truth[r])
        errors = reports[r].per_pose_errors
        for n, (e, g) in enumerate(zip(est_idx, gt_idx)):
            p = align.transform_points(estimates[r].poses[e].translation)[0]
            q = ground_truth[r].poses[g].translation
            rows.append([float(estimates[r].stamps[e]), r, *p.tolist(), *q.tolist(), errors[n]])
    return rows


def _percent(count: int, total: int) -> str:
    if count == 0 or total == 0:
        return "-"
    return fmt(100.0 * count / total, TABLE_DIGITS)


def _write_csv(path: Path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def emit_tables(cells: dict[str, CellResult], out_dir: Path, pairs: list[tuple[int, int]],
                svg: bool = False) -> list[Path]:
    """Outlier tables before/after PCM, success matrix, max ATE, and per-pair trajectories."""
    expected = [cell_name(p, f, m) for p in pairs for f in (False, True) for m in (False, True)]
    missing = [name for name in expected if name not in cells]
    if missing:
        raise IncompleteMatrix(missing)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def get(pair, f, m) -> CellResult:
        return cells[cell_name(pair, f, m)]

    for stage, use_pcm, fname in (("verified", False, "outliers_pre_pcm.csv"), ("pcm", True, "outliers_post_pcm.csv")):
        rows = []
        for pair in pairs:
            row = [f"{pair[0]}-{pair[1]}"]
            for f in (False, True):
                cell = get(pair, f, use_pcm)
                if cell.status != "ok":
                    row += ["failed"] * 4
                    continue
                counts = cell.report["categories"][stage]
                # shares are of classified loops only
                total = counts["correct"] + counts["wrong_pr"] + counts["wrong_pcr"]
                row += [_percent(counts["wrong_pr"], total), _percent(counts["wrong_pcr"], total),
                        _percent(counts["correct"], total), total]
            rows.append(row)
        path = out_dir / fname
        _write_csv(path, ["pair",
                          "all_wrong_pr_pct", "all_wrong_pcr_pct", "all_correct_pct", "all_total",
                          "tunnel_wrong_pr_pct", "tunnel_wrong_pcr_pct", "tunnel_correct_pct", "tunnel_total"], rows)
        written.append(path)

    combos = [(f, m) for f in (False, True) for m in (False, True)]
    combo_names = [f"{'tunnel' if f else 'all'}_{'pcm' if m else 'nopcm'}" for f, m in combos]

    rows = []
    for pair in pairs:
        row = [f"{pair[0]}-{pair[1]}"]
        for f, m in combos:
            cell = get(pair, f, m)
            row.append("failed" if cell.status != "ok" else ("yes" if cell.success else "no"))
        rows.append(row)
    path = out_dir / "success.csv"
    _write_csv(path, ["pair", *combo_names], rows)
    written.append(path)

    rows = []
    for pair in pairs:
        for robot in pair:
            row = [f"{pair[0]}-{pair[1]}", robot]
            for f, m in combos:
                cell = get(pair, f, m)
                if cell.status != "ok" or robot not in cell.ate:
                    row.append("failed")
                else:
                    row.append(fmt(cell.ate[robot]["max"], TABLE_DIGITS))
            rows.append(row)
    path = out_dir / "max_ate.csv"
    _write_csv(path, ["pair", "robot", *combo_names], rows)
    written.append(path)

    for pair in pairs:
        cell = get(pair, True, True)
        path = out_dir / f"trajectory_{pair[0]}_{pair[1]}.csv"
        rows = [[fmt(r[0], 12), int(r[1]), *[fmt(v, TABLE_DIGITS) for v in r[2:]]] for r in cell.trajectory_rows]
        _write_csv(path, ["stamp", "robot", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z", "error"], rows)
        written.append(path)
        if svg:
            write_trajectory_svg(cell.trajectory_rows, path.with_suffix(".svg"))
    logger.info(f"Wrote {len(written)} table files to {out_dir}")
    return written


TRAJECTORY_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def write_trajectory_svg(rows: list[list[float]], path: Path, size: int = 800):
    """Estimate (solid) against ground truth (dashed), one colour per robot, top-down."""
    path = Path(path)
    pts = np.array([[r[2], r[3]] for r in rows] + [[r[5], r[6]] for r in rows]) if rows else np.zeros((1, 2))
    lo = pts.min(axis=0)
    scale = (size - 40) / max(float(np.max(pts.max(axis=0) - lo)), 1e-9)

    def poly(xy) -> str:
        return " ".join(f"{fmt(20 + (x - lo[0]) * scale, 6)},{fmt(size - 20 - (y - lo[1]) * scale, 6)}" for x, y in xy)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for n, robot in enumerate(sorted({int(r[1]) for r in rows})):
        color = TRAJECTORY_COLORS[n % len(TRAJECTORY_COLORS)]
        mine = [r for r in rows if int(r[1]) == robot]
        parts.append(f'<polyline points="{poly((r[5], r[6]) for r in mine)}" fill="none" stroke="{color}" '
                     f'stroke-dasharray="4,3"/>')
        parts.append(f'<polyline points="{poly((r[2], r[3]) for r in mine)}" fill="none" stroke="{color}"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
