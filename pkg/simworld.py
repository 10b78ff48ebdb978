# simworld.py
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import networkx as nx
import numpy as np

from errors import InvalidSpec, SensorOutsideWorld, WaypointOutsideWorld
from geom import Pose3, PointCloud

logger = logging.getLogger(__name__)

JUNCTION_TOL = 1e-6
ROUGHNESS_WAVES = 4


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed on an explicit seed tuple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


# ═══════════════════════════════════════
# SPECS (config side)
# ═══════════════════════════════════════

@dataclass
class SegmentSpec:
    name: str
    start: list[float]
    end: list[float]
    cross_section: str = "circular"
    radius: float = 4.0
    width: float = 8.0
    height: float = 6.0


@dataclass
class WorldSpec:
    segments: list[SegmentSpec] = field(default_factory=list)
    surface_noise_sigma: float = 0.0
    seed: int = 0


@dataclass
class RobotSpec:
    robot: int
    waypoints: list[list[float]]
    speed: float = 1.87
    rate_hz: float = 10.0
    lateral_offset: float = 0.0
    corner_blend: float = 2.0
    max_step: Optional[float] = None

    @property
    def step(self) -> float:
        return self.speed / self.rate_hz

    @property
    def step_limit(self) -> float:
        return self.max_step if self.max_step is not None else 1.5 * self.step


@dataclass
class LidarModel:
    channels: int = 32
    horizontal_steps: int = 360
    vertical_fov: tuple[float, float] = (-22.5, 22.5)
    max_range: float = 80.0
    range_noise_sigma: float = 0.01
    dropout_prob: float = 0.0

    def __post_init__(self):
        self.vertical_fov = tuple(float(v) for v in self.vertical_fov)
        if self.max_range <= 0:
            raise InvalidSpec("lidar.max_range", "must be > 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise InvalidSpec("lidar.dropout_prob", "must be in [0, 1]")
        if self.channels < 1 or self.horizontal_steps < 1:
            raise InvalidSpec("lidar.channels", "channels and horizontal_steps must be >= 1")
        if self.range_noise_sigma < 0:
            raise InvalidSpec("lidar.range_noise_sigma", "must be >= 0")

    def ray_directions(self) -> np.ndarray:
        """Unit rays in the sensor frame, channel-major."""
        lo, hi = np.radians(self.vertical_fov)
        elev = np.array([0.0]) if self.channels == 1 else np.linspace(lo, hi, self.channels)
        azim = 2.0 * np.pi * np.arange(self.horizontal_steps) / self.horizontal_steps
        el, az = np.meshgrid(elev, azim, indexing="ij")
        dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
        return dirs.reshape(-1, 3)


@dataclass
class OdometryModel:
    kind: str = "ideal"  # ideal | drift_axial | wheel_constrained
    bias_per_meter: float = 0.0
    sigma: float = 0.0
    planar: bool = True
    slip_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ideal", "drift_axial", "wheel_constrained"):
            raise InvalidSpec("odometry_model.kind", f"unknown kind {self.kind!r}")
        if self.sigma < 0 or self.slip_sigma < 0:
            raise InvalidSpec("odometry_model.sigma", "sigmas must be >= 0")


# ═══════════════════════════════════════
# WORLD
# ═══════════════════════════════════════

@dataclass(frozen=True, eq=False)
class Segment:
    id: int
    name: str
    start: np.ndarray
    end: np.ndarray
    cross_section: str
    radius: float
    width: float
    height: float
    frame: np.ndarray  # rows: axis, lateral (left), up
    length: float
    axial_lo: float
    axial_hi: float

    @property
    def half_width(self) -> float:
        if self.cross_section == "circular":
            return self.radius
        return 0.5 * max(self.width, self.height)

    def local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float).reshape(-1, 3) - self.start) @ self.frame.T

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        loc = self.local(points)
        inside = (loc[:, 0] > self.axial_lo + margin) & (loc[:, 0] < self.axial_hi - margin)
        if self.cross_section == "circular":
            inside &= np.hypot(loc[:, 1], loc[:, 2]) < self.radius - margin
        else:
            inside &= np.abs(loc[:, 1]) < 0.5 * self.width - margin
            inside &= np.abs(loc[:, 2]) < 0.5 * self.height - margin
        return inside

    def centerline_distance(self, point: np.ndarray) -> float:
        d = self.end - self.start
        s = np.clip(np.dot(point - self.start, d) / np.dot(d, d), 0.0, 1.0)
        return float(np.linalg.norm(point - (self.start + s * d)))

    def ray_interval(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry/exit ray parameters of this convex volume; empty rays get (inf, -inf)."""
        o = self.local(origin)[0]
        d = dirs @ self.frame.T
        t_in, t_out = _slab(o[0], d[:, 0], self.axial_lo, self.axial_hi)
        if self.cross_section == "circular":
            a = d[:, 1] ** 2 + d[:, 2] ** 2
            b = 2.0 * (o[1] * d[:, 1] + o[2] * d[:, 2])
            c = o[1] ** 2 + o[2] ** 2 - self.radius ** 2
            parallel = a < 1e-15
            disc = b * b - 4.0 * a * c
            ok = disc >= 0
            with np.errstate(divide="ignore", invalid="ignore"):
                root = np.sqrt(np.where(ok, disc, 0.0))
                c_in = np.where(parallel, -np.inf, (-b - root) / (2.0 * a))
                c_out = np.where(parallel, np.inf, (-b + root) / (2.0 * a))
            empty = (~parallel & ~ok) | (parallel & (c > 0))
            c_in = np.where(empty, np.inf, c_in)
            c_out = np.where(empty, -np.inf, c_out)
            t_in, t_out = np.maximum(t_in, c_in), np.minimum(t_out, c_out)
        else:
            for axis, half in ((1, 0.5 * self.width), (2, 0.5 * self.height)):
                s_in, s_out = _slab(o[axis], d[:, axis], -half, half)
                t_in, t_out = np.maximum(t_in, s_in), np.minimum(t_out, s_out)
        return t_in, t_out


def _slab(p: float, d: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    flat = np.abs(d) < 1e-15
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - p) / d
        t2 = (hi - p) / d
    t_in = np.where(flat, np.where(lo <= p <= hi, -np.inf, np.inf), np.minimum(t1, t2))
    t_out = np.where(flat, np.where(lo <= p <= hi, np.inf, -np.inf), np.maximum(t1, t2))
    return t_in, t_out


@dataclass(frozen=True)
class Junction:
    point: tuple[float, float, float]
    segments: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class TunnelWorld:
    segments: tuple[Segment, ...]
    junctions: tuple[Junction, ...]
    surface_noise_sigma: float
    seed: int
    wave_vectors: np.ndarray
    wave_phases: np.ndarray

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        inside = np.zeros(points.shape[0], dtype=bool)
        for seg in self.segments:
            inside |= seg.contains(points, margin)
        return inside

    def segment_at(self, point) -> Optional[int]:
        point = np.asarray(point, dtype=float).reshape(1, 3)
        for seg in self.segments:
            if seg.contains(point)[0]:
                return seg.id
        return None

    def roughness(self, points: np.ndarray) -> np.ndarray:
        """Location-bound surface displacement (m); identical on every visit."""
        if self.surface_noise_sigma == 0.0:
            return np.zeros(points.shape[0])
        phase = points @ self.wave_vectors.T + self.wave_phases
        return self.surface_noise_sigma * np.sqrt(2.0 / ROUGHNESS_WAVES) * np.sin(phase).sum(axis=1)

    def exit_distances(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Distance along each ray to where it leaves the union of tunnel volumes."""
        t_in = np.empty((dirs.shape[0], len(self.segments)))
        t_out = np.empty_like(t_in)
        for k, seg in enumerate(self.segments):
            t_in[:, k], t_out[:, k] = seg.ray_interval(origin, dirs)
        valid = t_in <= t_out
        reach = np.where(valid & (t_in <= 0.0) & (t_out >= 0.0), t_out, 0.0).max(axis=1)
        for _ in range(len(self.segments)):
            chained = np.where(valid & (t_in <= reach[:, None] + 1e-9) & (t_out > reach[:, None]), t_out, reach[:, None])
            new_reach = chained.max(axis=1)
            if np.array_equal(new_reach, reach):
                break
            reach = new_reach
        return reach

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "surface_noise_sigma": self.surface_noise_sigma,
            "segments": [
                {
                    "id": s.id,
                    "name": s.name,
                    "start": s.start.tolist(),
                    "end": s.end.tolist(),
                    "cross_section": s.cross_section,
                    "radius": s.radius,
                    "width": s.width,
                    "height": s.height,
                }
                for s in self.segments
            ],
            "junctions": [{"point": list(j.point), "segments": list(j.segments)} for j in self.junctions],
        }

    def serialize(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _segment_frame(axis: np.ndarray) -> np.ndarray:
    up_ref = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.99 else np.array([1.0, 0.0, 0.0])
    lateral = np.cross(up_ref, axis)
    lateral /= np.linalg.norm(lateral)
    up = np.cross(axis, lateral)
    return np.vstack([axis, lateral, up])


def build_world(spec: WorldSpec) -> TunnelWorld:
    if not spec.segments:
        raise InvalidSpec("world.segments", "at least one segment is required")
    if spec.surface_noise_sigma < 0:
        raise InvalidSpec("world.surface_noise_sigma", "must be >= 0")

    raw = []
    for k, s in enumerate(spec.segments):
        key = f"world.segments[{k}]"
        start = np.asarray(s.start, dtype=float)
        end = np.asarray(s.end, dtype=float)
        if start.shape != (3,) or end.shape != (3,):
            raise InvalidSpec(f"{key}.start", "start and end must be 3-vectors")
        length = float(np.linalg.norm(end - start))
        if length <= 0:
            raise InvalidSpec(f"{key}.end", "segment has zero length")
        if s.cross_section == "circular":
            if s.radius <= 0:
                raise InvalidSpec(f"{key}.radius", "must be > 0")
        elif s.cross_section == "rectangular":
            if s.width <= 0 or s.height <= 0:
                raise InvalidSpec(f"{key}.width", "width and height must be > 0")
        else:
            raise InvalidSpec(f"{key}.cross_section", f"unknown cross section {s.cross_section!r}")
        raw.append((s, start, end, length))

    def on_centerline(point: np.ndarray, start: np.ndarray, end: np.ndarray) -> bool:
        d = end - start
        u = np.clip(np.dot(point - start, d) / np.dot(d, d), 0.0, 1.0)
        return np.linalg.norm(point - (start + u * d)) <= JUNCTION_TOL

    junctions: dict[tuple, Junction] = {}
    at_junction = [[False, False] for _ in raw]
    for k, (_, start, end, _) in enumerate(raw):
        for end_idx, point in enumerate((start, end)):
            members = tuple(m for m, (_, s2, e2, _) in enumerate(raw) if on_centerline(point, s2, e2))
            if len(members) < 2:
                continue
            at_junction[k][end_idx] = True
            key = (tuple(np.round(point, 6)), members)
            junctions.setdefault(key, Junction(tuple(float(v) for v in point), members))

    network = nx.Graph()
    network.add_nodes_from(range(len(raw)))
    for j in junctions.values():
        network.add_edges_from(zip(j.segments, j.segments[1:]))
    if not nx.is_connected(network):
        raise InvalidSpec("world.segments", "tunnel network is not connected")

    segments = []
    for k, (s, start, end, length) in enumerate(raw):
        half = s.radius if s.cross_section == "circular" else 0.5 * max(s.width, s.height)
        segments.append(
            Segment(
                id=k,
                name=s.name,
                start=start,
                end=end,
                cross_section=s.cross_section,
                radius=float(s.radius) if s.cross_section == "circular" else 0.5 * float(np.hypot(s.width, s.height)),
                width=float(s.width) if s.cross_section == "rectangular" else 2.0 * float(s.radius),
                height=float(s.height) if s.cross_section == "rectangular" else 2.0 * float(s.radius),
                frame=_segment_frame((end - start) / length),
                length=length,
                axial_lo=-half if at_junction[k][0] else 0.0,
                axial_hi=length + (half if at_junction[k][1] else 0.0),
            )
        )

    rng = make_rng(spec.seed, 0xC0FFEE)
    wavelengths = rng.uniform(2.0, 6.0, ROUGHNESS_WAVES)
    directions = rng.normal(size=(ROUGHNESS_WAVES, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    wave_vectors = directions * (2.0 * np.pi / wavelengths)[:, None]
    wave_phases = rng.uniform(0.0, 2.0 * np.pi, ROUGHNESS_WAVES)

    ordered = sorted(junctions.values(), key=lambda j: (j.segments, j.point))
    world = TunnelWorld(
        segments=tuple(segments),
        junctions=tuple(ordered),
        surface_noise_sigma=float(spec.surface_noise_sigma),
        seed=int(spec.seed),
        wave_vectors=wave_vectors,
        wave_phases=wave_phases,
    )
    logger.info(f"World built: {len(segments)} segments, {len(ordered)} junctions")
    return world


# ═══════════════════════════════════════
# LIDAR
# ═══════════════════════════════════════

def raycast_scan(world: TunnelWorld, sensor_pose: Pose3, model: LidarModel, seed: int) -> PointCloud:
    origin = sensor_pose.translation
    if not world.contains(origin[None], margin=1e-9)[0]:
        raise SensorOutsideWorld(f"sensor at {np.round(origin, 3).tolist()} is outside the tunnel volume")

    dirs_sensor = model.ray_directions()
    dirs_world = dirs_sensor @ sensor_pose.R.T
    ranges = world.exit_distances(origin, dirs_world)
    hits = origin + ranges[:, None] * dirs_world
    ranges = ranges + world.roughness(hits)

    rng = make_rng(seed)
    noise = rng.normal(0.0, 1.0, ranges.shape[0])
    keep_draw = rng.random(ranges.shape[0])
    if model.range_noise_sigma > 0:
        ranges = ranges + model.range_noise_sigma * noise

    keep = (ranges > 0) & (ranges <= model.max_range) & (keep_draw >= model.dropout_prob)
    points = ranges[keep, None] * dirs_sensor[keep]
    intensity = np.clip(1.0 - ranges[keep] / model.max_range, 0.0, 1.0)
    return PointCloud(points, intensity)


# ═══════════════════════════════════════
# TRAJECTORIES
# ═══════════════════════════════════════

@dataclass(eq=False)
class Trajectory:
    robot: int
    stamps: np.ndarray
    poses: list[Pose3]

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        if self.stamps.shape[0] != len(self.poses):
            raise InvalidSpec("trajectory", f"{self.stamps.shape[0]} stamps for {len(self.poses)} poses")
        if self.stamps.shape[0] > 1 and np.any(np.diff(self.stamps) <= 0):
            raise InvalidSpec("trajectory.stamps", "stamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.translation for p in self.poses])

    def path_length(self) -> float:
        pos = self.positions()
        if pos.shape[0] < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum())

    def duration(self) -> float:
        return float(self.stamps[-1] - self.stamps[0]) if len(self) > 1 else 0.0


@dataclass(frozen=True)
class TrajectoryStats:
    robot: int
    path_length: float
    duration: float
    average_speed: float


def trajectory_stats(traj: Trajectory) -> TrajectoryStats:
    length = traj.path_length()
    duration = traj.duration()
    return TrajectoryStats(traj.robot, length, duration, length / duration if duration > 0 else 0.0)


def _polyline(waypoints: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    seg_len = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    return seg_len, np.concatenate([[0.0], np.cumsum(seg_len)])


def _interp(waypoints: np.ndarray, cum: np.ndarray, s: np.ndarray) -> np.ndarray:
    s = np.clip(s, 0.0, cum[-1])
    return np.stack([np.interp(s, cum, waypoints[:, k]) for k in range(3)], axis=1)


def script_trajectory(world: TunnelWorld, spec: RobotSpec) -> Trajectory:
    waypoints = np.asarray(spec.waypoints, dtype=float).reshape(-1, 3)
    if waypoints.shape[0] < 2:
        raise InvalidSpec(f"robots[{spec.robot}].waypoints", "need at least 2 waypoints")
    if spec.speed <= 0 or spec.rate_hz <= 0:
        raise InvalidSpec(f"robots[{spec.robot}].speed", "speed and rate_hz must be > 0")
    outside = np.flatnonzero(~world.contains(waypoints))
    if outside.size:
        raise WaypointOutsideWorld(
            f"robot {spec.robot}: waypoint {outside[0]} {waypoints[outside[0]].tolist()} is outside the world"
        )

    seg_len, cum = _polyline(waypoints)
    if np.any(seg_len <= 0):
        raise InvalidSpec(f"robots[{spec.robot}].waypoints", "consecutive waypoints must differ")
    total = cum[-1]
    step = spec.step
    n = int(np.floor(total / step + 1e-9))
    s = step * np.arange(n + 1)
    s = np.minimum(s, total)
    if total - s[-1] > 1e-9:
        s = np.append(s, total)

    centre = _interp(waypoints, cum, s)
    ahead = _interp(waypoints, cum, s + spec.corner_blend)
    behind = _interp(waypoints, cum, s - spec.corner_blend)
    heading = ahead - behind
    yaw = np.arctan2(heading[:, 1], heading[:, 0])
    left = np.stack([-np.sin(yaw), np.cos(yaw), np.zeros_like(yaw)], axis=1)
    positions = centre + spec.lateral_offset * left

    outside = np.flatnonzero(~world.contains(positions))
    if outside.size:
        raise WaypointOutsideWorld(
            f"robot {spec.robot}: sampled pose {outside[0]} {np.round(positions[outside[0]], 3).tolist()} leaves the world"
        )
    spacing = np.linalg.norm(np.diff(positions, axis=0), axis=1)
    if spacing.size and spacing.max() > spec.step_limit + 1e-9:
        raise InvalidSpec(
            f"robots[{spec.robot}].lateral_offset",
            f"pose spacing {spacing.max():.3f} m exceeds max step {spec.step_limit:.3f} m",
        )

    poses = [Pose3.from_yaw(float(y), p) for y, p in zip(yaw, positions)]
    return Trajectory(robot=spec.robot, stamps=s / spec.speed, poses=poses)


def script_trajectories(world: TunnelWorld, specs: list[RobotSpec]) -> list[Trajectory]:
    trajectories = []
    for spec in specs:
        traj = script_trajectory(world, spec)
        stats = trajectory_stats(traj)
        logger.info(
            f"Robot {spec.robot}: {len(traj)} poses, {stats.path_length:.2f} m, "
            f"{stats.duration:.2f} s, {stats.average_speed:.2f} m/s"
        )
        trajectories.append(traj)
    return trajectories


# ═══════════════════════════════════════
# ODOMETRY DEGRADATION
# ═══════════════════════════════════════

def ground_truth_increments(traj: Trajectory) -> list[Pose3]:
    return [a.between(b) for a, b in zip(traj.poses[:-1], traj.poses[1:])]


def degrade_odometry(traj: Trajectory, model: OdometryModel) -> list[Pose3]:
    increments = ground_truth_increments(traj)
    if model.kind == "ideal":
        return increments

    rng = make_rng(model.seed, traj.robot)
    out = []
    for inc in increments:
        t = inc.translation
        dist = float(np.linalg.norm(t))
        forward = t / dist if dist > 0 else np.array([1.0, 0.0, 0.0])
        draw = rng.normal()
        if model.kind == "drift_axial":
            # bias and random walk both act along the local tunnel axis
            err = model.bias_per_meter * dist + model.sigma * np.sqrt(dist) * draw
            out.append(Pose3(inc.quat, t + err * forward))
        else:
            slip = model.slip_sigma * float(np.clip(draw, -3.0, 3.0))
            if model.planar:
                yaw = inc.yaw()
                planar_t = np.array([t[0], t[1], 0.0]) * (1.0 + slip)
                out.append(Pose3.from_yaw(yaw, planar_t))
            else:
                out.append(Pose3(inc.quat, t * (1.0 + slip)))
    return out


def integrate_increments(increments: list[Pose3], stamps: np.ndarray, robot: int,
                         start: Optional[Pose3] = None) -> Trajectory:
    pose = start or Pose3.identity()
    poses = [pose]
    for inc in increments:
        pose = pose.compose(inc)
        poses.append(pose)
    return Trajectory(robot=robot, stamps=stamps, poses=poses)
