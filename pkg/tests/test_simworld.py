# tests/test_simworld.py
import numpy as np
import pytest
from scipy.spatial import cKDTree

from errors import InvalidSpec, SensorOutsideWorld, WaypointOutsideWorld
from geom import Pose3
from simworld import (
    LidarModel, OdometryModel, RobotSpec, SegmentSpec, Trajectory, WorldSpec, build_world, degrade_odometry,
    ground_truth_increments, integrate_increments, raycast_scan, script_trajectories, script_trajectory,
    trajectory_stats,
)


def h_world_spec(**kwargs) -> WorldSpec:
    return WorldSpec(
        segments=[
            SegmentSpec("south", [0.0, 0.0, 0.0], [100.0, 0.0, 0.0]),
            SegmentSpec("north", [0.0, 20.0, 0.0], [100.0, 20.0, 0.0]),
            SegmentSpec("bar", [50.0, 0.0, 0.0], [50.0, 20.0, 0.0]),
        ],
        **kwargs,
    )


# ═══ World ═══

def test_single_segment_world(corridor_world):
    assert len(corridor_world.segments) == 1
    assert corridor_world.junctions == ()


def test_h_network_junctions():
    world = build_world(h_world_spec())
    assert len(world.segments) == 3
    assert len(world.junctions) == 2
    assert {j.segments for j in world.junctions} == {(0, 2), (1, 2)}


def test_world_serialization_is_deterministic():
    a = build_world(h_world_spec(surface_noise_sigma=0.05, seed=7))
    b = build_world(h_world_spec(surface_noise_sigma=0.05, seed=7))
    assert a.serialize() == b.serialize()


def test_zero_radius_names_field():
    spec = WorldSpec(segments=[SegmentSpec("bad", [0, 0, 0], [10, 0, 0], radius=0.0)])
    with pytest.raises(InvalidSpec) as err:
        build_world(spec)
    assert err.value.field == "world.segments[0].radius"


def test_disconnected_network():
    spec = WorldSpec(segments=[
        SegmentSpec("a", [0, 0, 0], [10, 0, 0]),
        SegmentSpec("b", [0, 50, 0], [10, 50, 0]),
    ])
    with pytest.raises(InvalidSpec) as err:
        build_world(spec)
    assert err.value.field == "world.segments"


def test_network_connected_through_chain():
    # "a" and "c" never touch; each meets "b" at a different end
    spec = WorldSpec(segments=[
        SegmentSpec("a", [0, 0, 0], [10, 0, 0]),
        SegmentSpec("b", [10, 0, 0], [10, 30, 0]),
        SegmentSpec("c", [10, 30, 0], [40, 30, 0]),
    ])
    world = build_world(spec)
    assert len(world.segments) == 3
    assert {j.segments for j in world.junctions} == {(0, 1), (1, 2)}


def test_one_isolated_segment_among_connected():
    segments = h_world_spec().segments + [SegmentSpec("far", [0.0, 200.0, 0.0], [50.0, 200.0, 0.0])]
    with pytest.raises(InvalidSpec):
        build_world(WorldSpec(segments=segments))


def test_empty_world():
    with pytest.raises(InvalidSpec):
        build_world(WorldSpec())


def test_roughness_bound_to_location():
    world = build_world(h_world_spec(surface_noise_sigma=0.05, seed=1))
    pts = np.array([[10.0, 4.0, 0.0], [60.0, 0.0, 4.0]])
    np.testing.assert_array_equal(world.roughness(pts), world.roughness(pts.copy()))
    assert np.any(world.roughness(pts) != 0.0)


# ═══ Lidar ═══

def test_raycast_hits_cylinder_wall(corridor_world):
    model = LidarModel(channels=1, horizontal_steps=36, max_range=80.0, range_noise_sigma=0.0)
    cloud = raycast_scan(corridor_world, Pose3.from_yaw(0.0, [50.0, 0.0, 0.0]), model, seed=0)
    pts = cloud.points
    lateral = np.abs(pts[:, 0]) < 40.0
    assert lateral.sum() == 34
    np.testing.assert_allclose(np.hypot(pts[lateral, 1], pts[lateral, 2]), 4.0, atol=1e-9)


def test_raycast_yaw_equivariance(corridor_world, lidar):
    base_pose = Pose3.from_yaw(0.0, [50.0, 0.0, 0.0])
    k = 7
    yaw = 2.0 * np.pi * k / lidar.horizontal_steps
    a = raycast_scan(corridor_world, base_pose, lidar, seed=0)
    b = raycast_scan(corridor_world, Pose3.from_yaw(yaw, [50.0, 0.0, 0.0]), lidar, seed=0)
    assert len(a) == len(b)
    # points of the yawed scan, expressed in the unrotated sensor frame
    b_world = Pose3.from_yaw(yaw).transform_points(b.points)
    dist, _ = cKDTree(a.points).query(b_world)
    assert dist.max() < 1e-6


def test_max_range_below_radius_gives_empty_scan(corridor_world):
    model = LidarModel(channels=8, horizontal_steps=36, max_range=1.0, range_noise_sigma=0.0)
    cloud = raycast_scan(corridor_world, Pose3.from_yaw(0.0, [50.0, 0.0, 0.0]), model, seed=0)
    assert len(cloud) == 0


def test_sensor_outside_world(corridor_world, lidar):
    with pytest.raises(SensorOutsideWorld):
        raycast_scan(corridor_world, Pose3.from_yaw(0.0, [50.0, 10.0, 0.0]), lidar, seed=0)


def test_scan_points_lie_on_surface(junction_world, lidar):
    pose = Pose3.from_yaw(0.4, [-10.0, 0.5, 0.2])
    smooth = build_world(WorldSpec(segments=[
        SegmentSpec(s.name, s.start.tolist(), s.end.tolist(), radius=s.radius) for s in junction_world.segments
    ]))
    cloud = raycast_scan(smooth, pose, lidar, seed=0)
    world_pts = pose.transform_points(cloud.points)
    # every hit sits on a tunnel boundary
    assert np.all(smooth.contains(world_pts, margin=-1e-6))
    assert not np.any(smooth.contains(world_pts, margin=1e-6))


def test_lidar_rejects_bad_dropout():
    with pytest.raises(InvalidSpec):
        LidarModel(dropout_prob=1.5)


# ═══ Trajectories ═══

def test_straight_trajectory_sampling(corridor_world):
    traj = script_trajectory(corridor_world, RobotSpec(robot=0, waypoints=[[0, 0, 0], [100, 0, 0]], speed=2.0, rate_hz=10.0))
    assert len(traj) == 501
    assert traj.path_length() == pytest.approx(100.0, abs=0.01)
    stats = trajectory_stats(traj)
    assert stats.duration == pytest.approx(50.0)
    assert stats.average_speed == pytest.approx(2.0, abs=1e-3)


def test_path_length_is_sum_of_steps(corridor_world):
    traj = script_trajectory(corridor_world, RobotSpec(robot=0, waypoints=[[0, 0, 0], [37.3, 0, 0]]))
    steps = np.linalg.norm(np.diff(traj.positions(), axis=0), axis=1)
    assert traj.path_length() == pytest.approx(steps.sum())
    assert steps.max() <= RobotSpec(robot=0, waypoints=[]).step_limit + 1e-9


def test_waypoint_outside_world(corridor_world):
    with pytest.raises(WaypointOutsideWorld):
        script_trajectory(corridor_world, RobotSpec(robot=0, waypoints=[[0, 0, 0], [50, 10, 0]]))


def test_robots_on_different_segments():
    world = build_world(h_world_spec())
    trajs = script_trajectories(world, [
        RobotSpec(robot=0, waypoints=[[5, 0, 0], [45, 0, 0]]),
        RobotSpec(robot=1, waypoints=[[5, 20, 0], [45, 20, 0]]),
    ])
    assert world.segment_at(trajs[0].poses[0].translation) != world.segment_at(trajs[1].poses[0].translation)


def test_trajectory_stamps_must_increase():
    with pytest.raises(InvalidSpec):
        Trajectory(robot=0, stamps=[0.0, 0.0], poses=[Pose3.identity(), Pose3.identity()])


# ═══ Odometry degradation ═══

@pytest.fixture
def straight(corridor_world):
    return script_trajectory(corridor_world, RobotSpec(robot=0, waypoints=[[0, 0, 0], [100, 0, 0]], speed=2.0, rate_hz=10.0))


def _final_error(traj, model) -> float:
    odo = integrate_increments(degrade_odometry(traj, model), traj.stamps, traj.robot, traj.poses[0])
    return float(np.linalg.norm(odo.poses[-1].translation - traj.poses[-1].translation))


def test_ideal_odometry_equals_ground_truth(straight):
    incs = degrade_odometry(straight, OdometryModel(kind="ideal"))
    for a, b in zip(incs, ground_truth_increments(straight)):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)


def test_axial_bias_accumulates(straight):
    model = OdometryModel(kind="drift_axial", bias_per_meter=0.02, sigma=0.0)
    odo = integrate_increments(degrade_odometry(straight, model), straight.stamps, 0, straight.poses[0])
    assert odo.poses[-1].translation[0] - straight.poses[-1].translation[0] == pytest.approx(2.0, abs=1e-6)


def test_wheel_constraint_beats_axial_drift(straight):
    drift = OdometryModel(kind="drift_axial", bias_per_meter=0.02, sigma=0.01, seed=4)
    wheel = OdometryModel(kind="wheel_constrained", slip_sigma=0.01, seed=4)
    assert _final_error(straight, wheel) < _final_error(straight, drift)


def test_degradation_is_seeded(straight):
    model = OdometryModel(kind="wheel_constrained", slip_sigma=0.01, seed=9)
    a = degrade_odometry(straight, model)
    b = degrade_odometry(straight, model)
    assert all(np.array_equal(x.matrix(), y.matrix()) for x, y in zip(a, b))


def test_unknown_odometry_kind():
    with pytest.raises(InvalidSpec):
        OdometryModel(kind="teleport")
