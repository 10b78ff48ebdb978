# tests/test_placerec.py
from dataclasses import replace

import numpy as np
import pytest

from errors import ConfigError, EmptyCloud, ShapeMismatch
from frontend import FrontendConfig, KeyFrame, apply_tunnel_filter
from geom import Pose3, PointCloud
from helpers import keyframes_along
from placerec import PlaceRecConfig, ScanContext, _column_bound, match_keyframes, sc_distance, scan_context
from simworld import LidarModel, SegmentSpec, WorldSpec, build_world, raycast_scan


def _descriptor(matrix: np.ndarray) -> ScanContext:
    return ScanContext(matrix, matrix.shape[0], matrix.shape[1], 80.0, (matrix > 0).sum(axis=1) / matrix.shape[1])


def _sector_cloud(rng, sectors: int = 60, yaw_sectors: int = 0) -> PointCloud:
    """Points at sector centres so a whole-sector yaw maps bins onto bins."""
    width = 2.0 * np.pi / sectors
    az = (np.arange(sectors) + 0.5 + yaw_sectors) * width
    radius = rng.choice([6.0, 18.0, 30.0, 50.0], size=sectors)
    heights = rng.uniform(0.5, 3.0, size=sectors)
    pts = np.stack([radius * np.cos(az), radius * np.sin(az), heights], axis=1)
    return PointCloud(pts)


# ═══ Descriptor ═══

def test_single_point_fills_one_bin():
    r, az = 10.0, np.radians(9.0)
    sc = scan_context(PointCloud(np.array([[r * np.cos(az), r * np.sin(az), 1.5]])))
    assert np.count_nonzero(sc.matrix) == 1
    assert sc.matrix[2, 1] == pytest.approx(1.5)


def test_one_sector_yaw_rolls_columns(rng):
    base = _sector_cloud(np.random.default_rng(1))
    rolled = _sector_cloud(np.random.default_rng(1), yaw_sectors=1)
    np.testing.assert_allclose(scan_context(rolled).matrix, np.roll(scan_context(base).matrix, 1, axis=1))


def test_points_beyond_range_give_empty_descriptor():
    sc = scan_context(PointCloud(np.array([[100.0, 0.0, 1.0], [0.0, -90.0, 2.0]])))
    assert sc.empty


def test_empty_cloud():
    with pytest.raises(EmptyCloud):
        scan_context(PointCloud(np.zeros((0, 3))))


def test_config_threshold_range():
    with pytest.raises(ConfigError):
        PlaceRecConfig(threshold=1.5)


# ═══ Distance ═══

def test_distance_to_self(rng):
    d = _descriptor(rng.uniform(0.1, 3.0, size=(20, 60)))
    dist, shift = sc_distance(d, d)
    assert dist == pytest.approx(0.0, abs=1e-12)
    assert shift == 0


def test_distance_recovers_shift(rng):
    m = rng.uniform(0.1, 3.0, size=(20, 60))
    dist, shift = sc_distance(_descriptor(m), _descriptor(np.roll(m, 13, axis=1)))
    assert dist == pytest.approx(0.0, abs=1e-12)
    assert shift == 13


def test_distance_is_symmetric(rng):
    for _ in range(20):
        a = _descriptor(rng.uniform(0.0, 3.0, size=(20, 60)) * (rng.random((20, 60)) > 0.5))
        b = _descriptor(rng.uniform(0.0, 3.0, size=(20, 60)) * (rng.random((20, 60)) > 0.5))
        assert sc_distance(a, b)[0] == pytest.approx(sc_distance(b, a)[0], abs=1e-9)


def test_distance_bounds(rng):
    a = _descriptor(rng.uniform(0.0, 3.0, size=(20, 60)))
    b = _descriptor(rng.uniform(0.0, 3.0, size=(20, 60)))
    assert 0.0 <= sc_distance(a, b)[0] <= 1.0


def test_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        sc_distance(_descriptor(np.ones((20, 60))), _descriptor(np.ones((10, 60))))


def test_straight_corridor_aliases():
    world = build_world(WorldSpec(segments=[SegmentSpec("long", [-200.0, 0.0, 0.0], [300.0, 0.0, 0.0])]))
    lidar = LidarModel(channels=16, horizontal_steps=180, range_noise_sigma=0.0)
    a = scan_context(raycast_scan(world, Pose3.from_yaw(0.0, [25.0, 0.0, 0.0]), lidar, 0), sensor_height=4.0)
    b = scan_context(raycast_scan(world, Pose3.from_yaw(0.0, [75.0, 0.0, 0.0]), lidar, 1), sensor_height=4.0)
    assert sc_distance(a, b)[0] < 0.05


# ═══ Matching ═══

def _keyframes(robot: int, clouds, informative=None) -> list[KeyFrame]:
    informative = informative or [True] * len(clouds)
    return [KeyFrame(robot, k, float(k), Pose3.identity(), c, informative=f)
            for k, (c, f) in enumerate(zip(clouds, informative))]


@pytest.fixture
def matching_sets():
    clouds = [_sector_cloud(np.random.default_rng(s)) for s in range(6)]
    a = _keyframes(0, clouds, [True, False, True, True, False, True])
    b = _keyframes(1, clouds[::-1], [True, True, False, True, True, True])
    return a, b


def test_self_matches(matching_sets):
    a, b = matching_sets
    candidates = match_keyframes(a, b, 0.9, use_filter=False)
    assert [(c.kf_a[1], c.kf_b[1]) for c in candidates] == [(k, 5 - k) for k in range(6)]
    assert all(c.similarity == pytest.approx(1.0) for c in candidates)


def test_threshold_above_one_never_matches(matching_sets):
    a, b = matching_sets
    assert match_keyframes(a, b, 1.0 + 1e-9, use_filter=False) == []


def test_filter_restricts_to_informative(matching_sets):
    a, b = matching_sets
    informative = {kf.key for kf in a + b if kf.informative}
    for c in match_keyframes(a, b, 0.5, use_filter=True):
        assert c.kf_a in informative and c.kf_b in informative


def _described(robot: int, descriptors: list[ScanContext]) -> list[KeyFrame]:
    cloud = PointCloud(np.zeros((1, 3)))
    return [KeyFrame(robot, k, float(k), Pose3.identity(), cloud, descriptor=d) for k, d in enumerate(descriptors)]


def test_prefilter_keeps_best_outside_nearest_ring_keys(rng):
    query = np.zeros((20, 60))
    query[:10, :30] = rng.uniform(1.0, 3.0, size=(10, 30))
    # same occupancy as the query, so the ring-key tree ranks every decoy first
    decoys = [query * np.where(query > 0, rng.uniform(0.7, 1.3, size=query.shape), 0.0) for _ in range(12)]
    # faint returns in the upper rings move the ring key away but leave the shape intact
    target = query.copy()
    target[10:, :30] = 1e-3
    pool = _described(1, [_descriptor(m) for m in decoys + [target]])
    q = _descriptor(query)
    assert all(np.linalg.norm(q.ring_key - kf.descriptor.ring_key) == 0.0 for kf in pool[:12])
    assert np.linalg.norm(q.ring_key - pool[12].descriptor.ring_key) > 1.0

    fast = match_keyframes(_described(0, [q]), pool, 0.5, use_filter=False, cfg=PlaceRecConfig(prefilter_k=10))
    slow = match_keyframes(_described(0, [q]), pool, 0.5, use_filter=False, cfg=PlaceRecConfig(prefilter_k=0))
    assert fast == slow
    assert fast[0].kf_b == (1, 12)
    assert fast[0].similarity > 0.9999


def test_prefilter_agrees_with_brute_force_on_random_pools(rng):
    def sparse():
        return _descriptor(rng.uniform(0.1, 3.0, size=(20, 60)) * (rng.random((20, 60)) > rng.uniform(0.2, 0.9)))

    a = _described(0, [sparse() for _ in range(8)])
    b = _described(1, [sparse() for _ in range(25)])
    for threshold in (0.0, 0.3, 0.6):
        fast = match_keyframes(a, b, threshold, use_filter=False, cfg=PlaceRecConfig(prefilter_k=3))
        slow = match_keyframes(a, b, threshold, use_filter=False, cfg=PlaceRecConfig(prefilter_k=0))
        assert fast == slow


def test_column_bound_never_exceeds_distance(rng):
    for _ in range(30):
        a = _descriptor(rng.uniform(0.1, 3.0, size=(20, 60)) * (rng.random((20, 60)) > rng.uniform(0.5, 0.99)))
        b = _descriptor(rng.uniform(0.1, 3.0, size=(20, 60)) * (rng.random((20, 60)) > rng.uniform(0.5, 0.99)))
        if a.empty or b.empty:
            continue
        assert _column_bound(a, b) <= sc_distance(a, b)[0] + 1e-12


def test_empty_descriptor_never_matches(matching_sets):
    a, b = matching_sets
    far = PointCloud(np.array([[200.0, 0.0, 1.0], [0.0, 300.0, 1.0]]))
    assert match_keyframes(_keyframes(0, [far]), b, 0.0, use_filter=False) == []


def test_mutual_best(matching_sets):
    a, b = matching_sets
    cfg = PlaceRecConfig(mutual_best=True)
    duplicated = a + [replace(a[0], index=6)]
    candidates = match_keyframes(duplicated, b, 0.9, use_filter=False, cfg=cfg)
    assert (0, 6) not in {c.kf_a for c in candidates}


# ═══ Simulated scans ═══

@pytest.mark.parametrize("yaw", [0.77, 2.9, -1.6])
def test_descriptor_survives_arbitrary_yaw(junction_scan, yaw):
    cfg = PlaceRecConfig()
    base = scan_context(junction_scan, cfg.rings, cfg.sectors, cfg.max_range, cfg.sensor_height)
    turned = junction_scan.transformed(Pose3.from_yaw(yaw))
    rotated = scan_context(turned, cfg.rings, cfg.sectors, cfg.max_range, cfg.sensor_height)
    assert sc_distance(base, rotated)[0] <= 0.05


@pytest.fixture
def junction_sessions(junction_world, lidar):
    """Robot 0 runs the gallery; robot 1 comes down the branch and turns west."""
    a, truth_a = keyframes_along(junction_world, 0, [[-25.0, 0.0, 0.0], [25.0, 0.0, 0.0]], lidar, seed=5)
    b, truth_b = keyframes_along(junction_world, 1, [[0.0, 25.0, 0.0], [0.0, 0.0, 0.0], [-20.0, 0.0, 0.0]],
                                 lidar, seed=5)
    return (a, truth_a), (b, truth_b)


def test_shared_junction_yields_true_candidate(junction_sessions):
    (a, truth_a), (b, truth_b) = junction_sessions
    candidates = match_keyframes(a, b, 0.7, use_filter=False)
    assert candidates
    gaps = [np.linalg.norm(truth_a[c.kf_a[1]].translation - truth_b[c.kf_b[1]].translation) for c in candidates]
    assert min(gaps) <= 2.0


def test_filter_never_adds_candidates(junction_sessions):
    (a, _), (b, _) = junction_sessions
    width = FrontendConfig().width_threshold
    a, b = apply_tunnel_filter(a, width), apply_tunnel_filter(b, width)
    assert any(not kf.informative for kf in a + b)
    for threshold in (0.5, 0.7, 0.9):
        filtered = match_keyframes(a, b, threshold, use_filter=True)
        unfiltered = match_keyframes(a, b, threshold, use_filter=False)
        assert len(filtered) <= len(unfiltered)
