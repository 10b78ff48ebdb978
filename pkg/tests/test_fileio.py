# tests/test_fileio.py
import csv

import numpy as np
import pytest

from errors import DatasetError
from fileio import fmt, read_ply, read_pose_csv, write_keyframe_dump, write_ply, write_pose_csv
from frontend import KeyFrame
from geom import Pose3, PointCloud
from helpers import random_pose


def test_fmt_uses_significant_digits():
    assert fmt(1.0) == "1"
    assert fmt(1 / 3) == "0.333333333333"
    assert fmt(123.456789, 6) == "123.457"


def test_ply_keeps_float32_points(tmp_path, rng):
    cloud = PointCloud(rng.normal(size=(50, 3)) * 10.0, rng.uniform(size=50))
    write_ply(tmp_path / "scan.ply", cloud)
    back = read_ply(tmp_path / "scan.ply")
    np.testing.assert_allclose(back.points, cloud.points, rtol=1e-6, atol=1e-5)
    np.testing.assert_allclose(back.intensity, cloud.intensity, atol=1e-6)


def test_empty_ply(tmp_path):
    write_ply(tmp_path / "empty.ply", PointCloud(np.zeros((0, 3))))
    assert len(read_ply(tmp_path / "empty.ply")) == 0


def test_truncated_ply(tmp_path, rng):
    path = tmp_path / "scan.ply"
    write_ply(path, PointCloud(rng.normal(size=(10, 3))))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DatasetError):
        read_ply(path)


def test_missing_ply(tmp_path):
    with pytest.raises(DatasetError):
        read_ply(tmp_path / "absent.ply")


def test_pose_csv(tmp_path, rng):
    poses = [random_pose(rng) for _ in range(20)]
    write_pose_csv(tmp_path / "poses.csv", [(0.1 * k, 2, p) for k, p in enumerate(poses)])
    rows = read_pose_csv(tmp_path / "poses.csv")
    assert [r for _, r, _ in rows] == [2] * 20
    for (stamp, _, pose), k, expected in zip(rows, range(20), poses):
        assert stamp == pytest.approx(0.1 * k)
        np.testing.assert_allclose(pose.matrix(), expected.matrix(), atol=1e-9)


def test_pose_csv_header_checked(tmp_path):
    path = tmp_path / "poses.csv"
    path.write_text("t,x,y\n0,1,2\n")
    with pytest.raises(DatasetError):
        read_pose_csv(path)


def test_keyframe_dump(tmp_path):
    kfs = [KeyFrame(0, k, float(k), Pose3.from_yaw(0.0, [2.0 * k, 0.0, 0.0]), PointCloud(np.ones((3, 3))),
                    informative=k % 2 == 0) for k in range(3)]
    index = write_keyframe_dump(tmp_path / "keyframes", kfs)
    with open(index, newline="") as f:
        rows = list(csv.DictReader(f))
    assert [r["informative"] for r in rows] == ["1", "0", "1"]
    assert rows[2]["x"] == "4"
    assert len(read_ply(tmp_path / "keyframes" / "kf_0_000001.ply")) == 3
