# tests/helpers.py
import numpy as np

from frontend import KeyFrame
from geom import Pose3, voxel_downsample
from graphcore import ODOMETRY_INFORMATION, Edge, PoseGraph
from simworld import LidarModel, RobotSpec, raycast_scan, script_trajectory


def random_pose(rng: np.random.Generator, trans_scale: float = 5.0, max_angle: float = 2.5) -> Pose3:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Pose3.from_rotvec(axis * rng.uniform(0.0, max_angle), rng.normal(size=3) * trans_scale)


def chain_graph(robot: int, poses: list[Pose3], information=ODOMETRY_INFORMATION) -> PoseGraph:
    graph = PoseGraph()
    for k, pose in enumerate(poses):
        graph.add_node((robot, k), pose)
    for k in range(len(poses) - 1):
        graph.add_edge(Edge((robot, k), (robot, k + 1), poses[k].between(poses[k + 1]), information))
    return graph


def keyframes_along(world, robot: int, waypoints, lidar: LidarModel, spacing: float = 2.0,
                    voxel: float = 0.5, seed: int = 0) -> tuple[list[KeyFrame], list[Pose3]]:
    """Keyframes in the robot's own odometry frame, with their world-frame ground truth."""
    traj = script_trajectory(world, RobotSpec(robot=robot, waypoints=waypoints, speed=2.0, rate_hz=10.0))
    origin = traj.poses[0].inverse()
    keyframes, truth, last = [], [], None
    for k, pose in enumerate(traj.poses):
        if last is not None and np.linalg.norm(pose.translation - last) < spacing:
            continue
        cloud = voxel_downsample(raycast_scan(world, pose, lidar, seed * 100_000 + robot * 10_000 + k), voxel)
        keyframes.append(KeyFrame(robot, len(keyframes), float(traj.stamps[k]), origin.compose(pose), cloud))
        truth.append(pose)
        last = pose.translation
    return keyframes, truth
