# tests/conftest.py
import numpy as np
import pytest

from geom import Pose3, PointCloud
from simworld import LidarModel, SegmentSpec, WorldSpec, build_world, raycast_scan


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def lidar():
    return LidarModel(channels=16, horizontal_steps=180, max_range=80.0, range_noise_sigma=0.0)


@pytest.fixture
def corridor_world():
    return build_world(WorldSpec(segments=[SegmentSpec("main", [-5.0, 0.0, 0.0], [105.0, 0.0, 0.0], radius=4.0)]))


@pytest.fixture
def junction_world():
    """T-junction: a 60 m gallery with a 30 m branch leaving its middle."""
    return build_world(WorldSpec(
        segments=[
            SegmentSpec("gallery", [-30.0, 0.0, 0.0], [30.0, 0.0, 0.0], radius=4.0),
            SegmentSpec("branch", [0.0, 0.0, 0.0], [0.0, 30.0, 0.0], radius=4.0),
        ],
        surface_noise_sigma=0.05,
        seed=3,
    ))


@pytest.fixture
def junction_scan(junction_world, lidar) -> PointCloud:
    return raycast_scan(junction_world, Pose3.from_yaw(0.3, [1.0, -0.5, 0.0]), lidar, seed=11)


@pytest.fixture
def corridor_scan(corridor_world, lidar) -> PointCloud:
    return raycast_scan(corridor_world, Pose3.from_yaw(0.0, [50.0, 0.0, 0.0]), lidar, seed=12)
