# tests/test_frontend.py
import numpy as np
import pytest

from helpers import random_pose
from errors import ConfigError, EmptyCloud, NoCorrespondences, StreamLengthMismatch
from evaluation import ate
from frontend import (
    FrontendConfig, KeyFrame, OdometryConfig, apply_tunnel_filter, icp_register, run_odometry, select_keyframes,
    tunnel_filter,
)
from geom import Pose3, PointCloud, voxel_downsample
from simworld import (
    LidarModel, OdometryModel, RobotSpec, SegmentSpec, Trajectory, WorldSpec, build_world, degrade_odometry,
    raycast_scan, script_trajectory,
)


# ═══ ICP ═══

def test_icp_identical_clouds(junction_scan):
    cloud = voxel_downsample(junction_scan, 0.5)
    result = icp_register(cloud, cloud, Pose3.identity(), OdometryConfig())
    assert result.fitness == 1.0
    assert result.pose.rotation_angle() < 1e-9
    np.testing.assert_allclose(result.pose.translation, np.zeros(3), atol=1e-9)


def test_icp_recovers_small_offset(junction_scan):
    source = voxel_downsample(junction_scan, 0.5)
    truth = Pose3.from_rotvec([0.0, 0.0, np.radians(5.0)], [0.2, -0.1, 0.0])
    target = source.transformed(truth)
    result = icp_register(source, target, Pose3.identity(), OdometryConfig(max_iterations=60))
    assert result.pose.between(truth).rotation_angle() < np.radians(0.5)
    assert np.linalg.norm(result.pose.translation - truth.translation) < 0.01


def test_icp_is_equivariant_under_common_transform(rng, junction_scan):
    source = voxel_downsample(junction_scan, 0.5)
    target = source.transformed(Pose3.from_rotvec([0.0, 0.0, np.radians(4.0)], [0.3, 0.1, 0.0]))
    init = Pose3.from_yaw(0.02, [0.05, 0.0, 0.0])
    # run both to their fixed point so the stopping test cannot differ
    cfg = OdometryConfig(max_iterations=100, convergence_eps=1e-12)
    g = random_pose(rng)
    plain = icp_register(source, target, init, cfg)
    moved = icp_register(source.transformed(g), target.transformed(g), g.compose(init).compose(g.inverse()), cfg)
    expected = g.compose(plain.pose).compose(g.inverse())
    assert moved.pose.between(expected).rotation_angle() < 1e-6
    np.testing.assert_allclose(moved.pose.translation, expected.translation, atol=1e-6)
    assert moved.fitness == pytest.approx(plain.fitness)


def test_icp_cannot_see_motion_along_a_bare_cylinder(corridor_world):
    lidar = LidarModel(channels=16, horizontal_steps=180, max_range=20.0, range_noise_sigma=0.0)
    here = Pose3.from_yaw(0.0, [50.0, 0.0, 0.0])
    there = Pose3.from_yaw(0.0, [51.0, 0.2, 0.0])
    target = raycast_scan(corridor_world, here, lidar, seed=0)
    source = raycast_scan(corridor_world, there, lidar, seed=1)
    truth = here.between(there)
    result = icp_register(voxel_downsample(source, 0.25), voxel_downsample(target, 0.25), Pose3.identity(),
                          OdometryConfig(max_iterations=60, voxel_size=0.25))
    error = result.pose.translation - truth.translation
    assert abs(error[0]) > 0.5
    assert abs(error[1]) < 0.1


def test_icp_empty_cloud(junction_scan):
    with pytest.raises(EmptyCloud):
        icp_register(PointCloud(np.zeros((0, 3))), junction_scan, Pose3.identity(), OdometryConfig())


def test_icp_no_correspondences(junction_scan):
    far = Pose3.from_yaw(0.0, [500.0, 0.0, 0.0])
    with pytest.raises(NoCorrespondences):
        icp_register(junction_scan, junction_scan, far, OdometryConfig())


def test_odometry_config_rejects_mode():
    with pytest.raises(ConfigError) as err:
        OdometryConfig(mode="magic")
    assert err.value.key == "odometry.mode"


# ═══ Odometry ═══

def test_identical_scans_do_not_move(junction_scan):
    traj = run_odometry([junction_scan, junction_scan], None, OdometryConfig())
    assert len(traj) == 2
    assert traj.poses[1].rotation_angle() < 1e-9
    np.testing.assert_allclose(traj.poses[1].translation, np.zeros(3), atol=1e-9)


def test_kinematic_requires_wheel_stream(junction_scan):
    cfg = OdometryConfig(mode="kinematic")
    with pytest.raises(StreamLengthMismatch):
        run_odometry([junction_scan, junction_scan], None, cfg)
    with pytest.raises(StreamLengthMismatch):
        run_odometry([junction_scan, junction_scan], [Pose3.identity()] * 3, cfg)


def test_empty_stream():
    assert len(run_odometry([], None, OdometryConfig())) == 0


def test_kinematic_mode_survives_featureless_corridor():
    world = build_world(WorldSpec(segments=[SegmentSpec("c", [-30.0, 0.0, 0.0], [150.0, 0.0, 0.0], radius=3.0)]))
    lidar = LidarModel(channels=16, horizontal_steps=180, max_range=20.0, range_noise_sigma=0.01)
    truth = script_trajectory(world, RobotSpec(robot=0, waypoints=[[0, 0, 0], [20, 0, 0]], speed=1.87, rate_hz=5.0))
    scans = [raycast_scan(world, pose, lidar, seed=k) for k, pose in enumerate(truth.poses)]
    wheel = degrade_odometry(truth, OdometryModel(kind="wheel_constrained", slip_sigma=0.005, seed=0))

    def final_error(traj: Trajectory) -> float:
        end = truth.poses[0].compose(traj.poses[-1])
        return float(np.linalg.norm(end.translation - truth.poses[-1].translation))

    free = run_odometry(scans, None, OdometryConfig(mode="unconstrained"))
    constrained = run_odometry(scans, wheel, OdometryConfig(mode="kinematic"))
    assert final_error(constrained) < 0.5
    assert final_error(free) > 5.0 * final_error(constrained)


@pytest.mark.slow
@pytest.mark.parametrize("mode", ["unconstrained", "kinematic"])
def test_junction_path_stays_within_one_percent(junction_world, lidar, mode):
    truth = script_trajectory(junction_world, RobotSpec(
        robot=0, waypoints=[[-25.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 25.0, 0.0]], speed=2.0, rate_hz=5.0,
    ))
    scans = [raycast_scan(junction_world, pose, lidar, seed=k) for k, pose in enumerate(truth.poses)]
    wheel = degrade_odometry(truth, OdometryModel(kind="wheel_constrained", slip_sigma=0.005, seed=0))
    traj = run_odometry(scans, wheel if mode == "kinematic" else None, OdometryConfig(mode=mode),
                        stamps=truth.stamps)
    assert ate(traj, truth).ratio_max_over_length < 0.01


@pytest.mark.slow
def test_axial_drift_bias_never_reduces_error():
    world = build_world(WorldSpec(segments=[SegmentSpec("c", [-30.0, 0.0, 0.0], [150.0, 0.0, 0.0], radius=3.0)]))
    lidar = LidarModel(channels=16, horizontal_steps=180, max_range=20.0, range_noise_sigma=0.01)
    truth = script_trajectory(world, RobotSpec(robot=0, waypoints=[[0, 0, 0], [20, 0, 0]], speed=1.87, rate_hz=5.0))
    scans = [raycast_scan(world, pose, lidar, seed=k) for k, pose in enumerate(truth.poses)]

    errors = []
    for bias in (0.0, 0.02, 0.05):
        wheel = degrade_odometry(truth, OdometryModel(kind="drift_axial", bias_per_meter=bias, sigma=0.0, seed=3))
        traj = run_odometry(scans, wheel, OdometryConfig(mode="kinematic"), stamps=truth.stamps)
        errors.append(ate(traj, truth).max)
    assert errors == sorted(errors)


# ═══ Keyframes ═══

def _line_trajectory(xs) -> Trajectory:
    return Trajectory(robot=2, stamps=np.arange(len(xs), dtype=float),
                      poses=[Pose3.from_yaw(0.0, [x, 0.0, 0.0]) for x in xs])


def _dummy_scans(n: int) -> list[PointCloud]:
    return [PointCloud(np.random.default_rng(k).normal(size=(20, 3)) * 5.0) for k in range(n)]


def test_keyframe_selection_by_distance():
    traj = _line_trajectory([0.0, 0.3, 0.6, 1.1])
    kfs = select_keyframes(traj, _dummy_scans(4), 0.5)
    assert [kf.pose.translation[0] for kf in kfs] == [0.0, 0.6, 1.1]
    assert [kf.key for kf in kfs] == [(2, 0), (2, 1), (2, 2)]


def test_short_trajectory_single_keyframe():
    kfs = select_keyframes(_line_trajectory([0.0, 0.2, 0.49]), _dummy_scans(3), 0.5)
    assert len(kfs) == 1


def test_keyframe_spacing(corridor_world):
    traj = script_trajectory(corridor_world, RobotSpec(robot=0, waypoints=[[0, 0, 0], [30, 0, 0]]))
    kfs = select_keyframes(traj, _dummy_scans(len(traj)), 0.5)
    gaps = np.linalg.norm(np.diff([kf.pose.translation for kf in kfs], axis=0), axis=1)
    assert gaps.min() >= 0.5 - 1e-9


def test_keyframe_count_follows_path_length():
    world = build_world(WorldSpec(segments=[
        SegmentSpec("south", [0.0, 0.0, 0.0], [100.0, 0.0, 0.0]),
        SegmentSpec("north", [0.0, 20.0, 0.0], [100.0, 20.0, 0.0]),
        SegmentSpec("bar", [50.0, 0.0, 0.0], [50.0, 20.0, 0.0]),
    ]))
    waypoints = [[0.0, 0.0, 0.0], [50.0, 0.0, 0.0], [50.0, 20.0, 0.0], [100.0, 20.0, 0.0]]
    traj = script_trajectory(world, RobotSpec(robot=0, waypoints=waypoints, speed=2.0, rate_hz=40.0))
    kfs = select_keyframes(traj, _dummy_scans(len(traj)), 0.5)
    assert abs(len(kfs) - (traj.path_length() / 0.5 + 1)) <= 5


def test_keyframe_distance_must_be_positive():
    with pytest.raises(ConfigError):
        select_keyframes(_line_trajectory([0.0]), _dummy_scans(1), 0.0)
    with pytest.raises(ConfigError):
        FrontendConfig(keyframe_distance=-1.0)


# ═══ Tunnel filter ═══

def _kf(cloud: PointCloud) -> KeyFrame:
    return KeyFrame(0, 0, 0.0, Pose3.identity(), cloud)


def test_corridor_scan_is_uninformative(corridor_scan):
    assert not tunnel_filter(_kf(corridor_scan), 10.0)


def test_junction_scan_is_informative(junction_scan):
    assert tunnel_filter(_kf(junction_scan), 10.0)


def test_zero_threshold_keeps_everything(corridor_scan):
    assert tunnel_filter(_kf(corridor_scan), 0.0)


def test_filter_is_rigid_invariant(rng, corridor_scan, junction_scan):
    for cloud in (corridor_scan, junction_scan):
        moved = cloud.transformed(random_pose(rng))
        assert tunnel_filter(_kf(moved), 10.0) == tunnel_filter(_kf(cloud), 10.0)


def test_apply_tunnel_filter_marks_keyframes(corridor_scan, junction_scan):
    out = apply_tunnel_filter([_kf(corridor_scan), _kf(junction_scan)], 10.0)
    assert [kf.informative for kf in out] == [False, True]
