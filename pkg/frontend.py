# frontend.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from errors import (
    ConfigError, DegenerateInput, EmptyCloud, NoCorrespondences, StreamLengthMismatch,
)
from geom import Pose3, PointCloud, oriented_bbox, umeyama_align, voxel_downsample
from simworld import Trajectory

logger = logging.getLogger(__name__)


@dataclass
class OdometryConfig:
    mode: str = "unconstrained"  # unconstrained | kinematic
    max_correspondence_dist: float = 1.0
    voxel_size: float = 0.5
    max_iterations: int = 30
    convergence_eps: float = 1e-4
    # per-correspondence weight of the wheel prior in kinematic mode
    wheel_prior_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("unconstrained", "kinematic"):
            raise ConfigError("odometry.mode", f"unknown mode {self.mode!r}")
        for key in ("max_correspondence_dist", "voxel_size", "convergence_eps"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"odometry.{key}", "must be > 0")
        if self.max_iterations < 1:
            raise ConfigError("odometry.max_iterations", "must be >= 1")
        if self.wheel_prior_weight < 0:
            raise ConfigError("odometry.wheel_prior_weight", "must be >= 0")


@dataclass
class FrontendConfig:
    keyframe_distance: float = 0.5
    width_threshold: float = 10.0
    odometry: OdometryConfig = field(default_factory=OdometryConfig)

    def __post_init__(self):
        if self.keyframe_distance <= 0:
            raise ConfigError("frontend.keyframe_distance", "must be > 0")
        if self.width_threshold < 0:
            raise ConfigError("frontend.width_threshold", "must be >= 0")


@dataclass(frozen=True, eq=False)
class KeyFrame:
    robot: int
    index: int
    stamp: float
    pose: Pose3
    cloud: PointCloud
    informative: bool = True
    descriptor: Optional[object] = None  # placerec.ScanContext once described

    @property
    def key(self) -> tuple[int, int]:
        return (self.robot, self.index)


@dataclass(frozen=True)
class IcpResult:
    pose: Pose3
    fitness: float
    rmse: float
    iterations: int


# ═══════════════════════════════════════
# ICP
# ═══════════════════════════════════════

def _planar_params(pose: Pose3) -> np.ndarray:
    return np.array([pose.translation[0], pose.translation[1], pose.yaw()])


def _planar_pose(params: np.ndarray, prior: Pose3) -> Pose3:
    # z, roll and pitch come from the wheel prior
    tilt = Pose3.from_yaw(-prior.yaw()).compose(Pose3(prior.quat, np.zeros(3)))
    rot = Pose3.from_yaw(float(params[2])).compose(tilt)
    return Pose3(rot.quat, [params[0], params[1], prior.translation[2]])


def _wrap(angle: float) -> float:
    return float((angle + np.pi) % (2.0 * np.pi) - np.pi)


def icp_register(source: PointCloud, target: PointCloud, init: Pose3, cfg: OdometryConfig,
                 wheel_prior: Optional[Pose3] = None) -> IcpResult:
    """Point-to-point ICP of source onto target starting from init.

    In kinematic mode the update is restricted to (x, y, yaw) and pulled toward
    the wheel prior; the returned pose maps source-frame points into the target frame.
    """
    if len(source) == 0 or len(target) == 0:
        raise EmptyCloud(f"icp_register on empty cloud ({len(source)} source, {len(target)} target)")

    tree = cKDTree(target.points)
    src = source.points
    tgt = target.points
    kinematic = cfg.mode == "kinematic"
    prior = wheel_prior if wheel_prior is not None else init
    prior_params = _planar_params(prior)
    params = _planar_params(init)
    pose = _planar_pose(params, prior) if kinematic else init

    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        moved = pose.transform_points(src)
        dist, idx = tree.query(moved, distance_upper_bound=cfg.max_correspondence_dist)
        mask = np.isfinite(dist)
        if not mask.any():
            if iterations == 1:
                raise NoCorrespondences(
                    f"no correspondences within {cfg.max_correspondence_dist} m at the initial guess"
                )
            break

        if kinematic:
            q = moved[mask]
            e = q - tgt[idx[mask]]
            lever = q - pose.translation
            jac = np.zeros((q.shape[0], 3, 3))
            jac[:, 0, 0] = 1.0
            jac[:, 1, 1] = 1.0
            jac[:, 0, 2] = -lever[:, 1]
            jac[:, 1, 2] = lever[:, 0]
            weight = cfg.wheel_prior_weight * q.shape[0]
            diff = params - prior_params
            diff[2] = _wrap(diff[2])
            h = np.einsum("nki,nkj->ij", jac, jac) + weight * np.eye(3)
            b = np.einsum("nki,nk->i", jac, e) + weight * diff
            delta = -np.linalg.solve(h, b)
            params = params + delta
            pose = _planar_pose(params, prior)
            step = float(np.linalg.norm(delta))
        else:
            try:
                delta = umeyama_align(moved[mask], tgt[idx[mask]])
            except DegenerateInput:
                break
            pose = delta.compose(pose)
            step = float(np.linalg.norm(delta.translation)) + delta.rotation_angle()

        if step < cfg.convergence_eps:
            break

    moved = pose.transform_points(src)
    dist, _ = tree.query(moved, distance_upper_bound=cfg.max_correspondence_dist)
    mask = np.isfinite(dist)
    fitness = float(mask.sum()) / len(source)
    rmse = float(np.sqrt(np.mean(dist[mask] ** 2))) if mask.any() else float("inf")
    return IcpResult(pose=pose, fitness=fitness, rmse=rmse, iterations=iterations)


# ═══════════════════════════════════════
# ODOMETRY
# ═══════════════════════════════════════

def run_odometry(scans: Iterable[PointCloud], wheel: Optional[list[Pose3]], cfg: OdometryConfig,
                 stamps: Optional[np.ndarray] = None, robot: int = 0) -> Trajectory:
    scans = list(scans)
    if cfg.mode == "kinematic":
        if wheel is None:
            raise StreamLengthMismatch("kinematic odometry requires a wheel increment stream")
        if len(wheel) != len(scans) - 1:
            raise StreamLengthMismatch(f"{len(scans)} scans but {len(wheel)} wheel increments")
    if stamps is None:
        stamps = np.arange(len(scans), dtype=float)

    if not scans:
        return Trajectory(robot=robot, stamps=np.zeros(0), poses=[])
    poses = [Pose3.identity()]
    velocity = Pose3.identity()
    previous = voxel_downsample(scans[0], cfg.voxel_size)
    for k in range(1, len(scans)):
        current = voxel_downsample(scans[k], cfg.voxel_size)
        if cfg.mode == "kinematic":
            init = wheel[k - 1]
            result = icp_register(current, previous, init, cfg, wheel_prior=wheel[k - 1])
        else:
            result = icp_register(current, previous, velocity, cfg)
        velocity = result.pose
        poses.append(poses[-1].compose(result.pose))
        previous = current
        if k % 500 == 0:
            logger.info(f"Robot {robot} odometry ({cfg.mode}): {k}/{len(scans)} scans")
    return Trajectory(robot=robot, stamps=stamps, poses=poses)


# ═══════════════════════════════════════
# KEYFRAMES + TUNNEL FILTER
# ═══════════════════════════════════════

def select_keyframes(traj: Trajectory, scans: Iterable[PointCloud], keyframe_distance: float,
                     voxel_size: float = 0.5) -> list[KeyFrame]:
    if keyframe_distance <= 0:
        raise ConfigError("frontend.keyframe_distance", "must be > 0")
    keyframes: list[KeyFrame] = []
    last = None
    for k, (pose, cloud) in enumerate(zip(traj.poses, scans)):
        if last is not None and np.linalg.norm(pose.translation - last) < keyframe_distance - 1e-9:
            continue
        keyframes.append(
            KeyFrame(
                robot=traj.robot,
                index=len(keyframes),
                stamp=float(traj.stamps[k]),
                pose=pose,
                cloud=voxel_downsample(cloud, voxel_size),
            )
        )
        last = pose.translation
    return keyframes


def tunnel_filter(kf: KeyFrame, width_threshold: float) -> bool:
    """True when the keyframe is informative: the PCA box's second extent reaches the threshold."""
    return bool(oriented_bbox(kf.cloud).extents[1] >= width_threshold)


def apply_tunnel_filter(keyframes: list[KeyFrame], width_threshold: float) -> list[KeyFrame]:
    out = [replace(kf, informative=tunnel_filter(kf, width_threshold)) for kf in keyframes]
    if out:
        kept = sum(kf.informative for kf in out)
        logger.info(f"Robot {out[0].robot}: tunnel filter keeps {kept}/{len(out)} keyframes")
    return out
