# fileio.py
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable

import numpy as np

from errors import DatasetError
from geom import Pose3, PointCloud

logger = logging.getLogger(__name__)

PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4")])
POSE_HEADER = ["stamp", "robot", "x", "y", "z", "qw", "qx", "qy", "qz"]
KEYFRAME_HEADER = ["robot", "index", "informative", "x", "y", "z", "qw", "qx", "qy", "qz"]


def fmt(value: float, digits: int = 12) -> str:
    return f"{value:.{digits}g}"


# ═══════════════════════════════════════
# PLY
# ═══════════════════════════════════════

def write_ply(path: Path, cloud: PointCloud):
    data = np.zeros(len(cloud), dtype=PLY_DTYPE)
    data["x"], data["y"], data["z"] = cloud.points.T
    if cloud.intensity is not None:
        data["intensity"] = cloud.intensity
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float intensity\n"
        "end_header\n"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def read_ply(path: Path) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing scan {path}")
    with open(path, "rb") as f:
        count = None
        while True:
            line = f.readline()
            if not line:
                raise DatasetError(f"{path}: truncated PLY header")
            text = line.decode("ascii").strip()
            if text.startswith("element vertex"):
                count = int(text.split()[-1])
            if text == "end_header":
                break
        if count is None:
            raise DatasetError(f"{path}: PLY header has no vertex count")
        payload = f.read(count * PLY_DTYPE.itemsize)
    if len(payload) != count * PLY_DTYPE.itemsize:
        raise DatasetError(f"{path}: expected {count} vertices, found {len(payload) / PLY_DTYPE.itemsize:g}")
    data = np.frombuffer(payload, dtype=PLY_DTYPE)
    points = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(float)
    return PointCloud(points, data["intensity"].astype(float))


# ═══════════════════════════════════════
# POSE CSV (ground truth, wheel odometry, estimates)
# ═══════════════════════════════════════

def write_pose_csv(path: Path, rows: Iterable[tuple[float, int, Pose3]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(POSE_HEADER)
        for stamp, robot, pose in rows:
            writer.writerow([fmt(stamp), robot, *[fmt(v) for v in pose.to_xyz_quat()]])


def read_pose_csv(path: Path) -> list[tuple[float, int, Pose3]]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing pose file {path}")
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != POSE_HEADER:
            raise DatasetError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            pose = Pose3(
                np.array([float(rec["qw"]), float(rec["qx"]), float(rec["qy"]), float(rec["qz"])]),
                [float(rec["x"]), float(rec["y"]), float(rec["z"])],
            )
            rows.append((float(rec["stamp"]), int(rec["robot"]), pose))
    return rows


# ═══════════════════════════════════════
# KEYFRAME / DEBUG DUMPS
# ═══════════════════════════════════════

def write_keyframe_dump(directory: Path, keyframes) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index_path = directory / "keyframes.csv"
    with open(index_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(KEYFRAME_HEADER)
        for kf in keyframes:
            writer.writerow([kf.robot, kf.index, int(kf.informative), *[fmt(v) for v in kf.pose.to_xyz_quat()]])
            write_ply(directory / f"kf_{kf.robot}_{kf.index:06d}.ply", kf.cloud)
    return index_path


def write_descriptor_dump(path: Path, keyframes, descriptors: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["robot", "index", "rings", "sectors", "values"])
        for kf in keyframes:
            sc = descriptors[(kf.robot, kf.index)]
            values = " ".join(fmt(v, 6) for v in sc.matrix.reshape(-1))
            writer.writerow([kf.robot, kf.index, sc.rings, sc.sectors, values])
