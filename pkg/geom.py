# geom.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from errors import DegenerateInput

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-4
# (−ad)^k/(k+1)! converges factorially; 30 terms cover residuals up to ~π rad and tens of metres
JACOBIAN_SERIES_TERMS = 30


# ═══════════════════════════════════════
# SO(3) / SE(3) HELPERS (batched, tangent ordering = (ω, ν))
# ═══════════════════════════════════════

def hat(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of one 3-vector or a (N, 3) batch."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _v_coefficients(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, (1.0 - np.cos(safe)) / safe ** 2)
    c = np.where(small, 1.0 / 6.0 - theta ** 2 / 120.0, (safe - np.sin(safe)) / safe ** 3)
    return b, c


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.atleast_2d(omega)
    theta = np.linalg.norm(omega, axis=1)
    b, c = _v_coefficients(theta)
    w = hat(omega)
    return np.eye(3) + b[:, None, None] * w + c[:, None, None] * (w @ w)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.atleast_2d(omega)
    theta = np.linalg.norm(omega, axis=1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    d = np.where(
        small,
        1.0 / 12.0 + theta ** 2 / 720.0,
        (1.0 - safe * np.sin(safe) / (2.0 * (1.0 - np.cos(safe)))) / safe ** 2,
    )
    w = hat(omega)
    return np.eye(3) - 0.5 * w + d[:, None, None] * (w @ w)


def se3_exp_batch(xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    omega, nu = xi[:, :3], xi[:, 3:]
    rot = Rotation.from_rotvec(omega).as_matrix()
    trans = np.einsum("nij,nj->ni", so3_left_jacobian(omega), nu)
    return rot, trans


def se3_log_batch(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=float).reshape(-1, 3, 3)
    trans = np.asarray(trans, dtype=float).reshape(-1, 3)
    omega = Rotation.from_matrix(rot).as_rotvec()
    theta = np.linalg.norm(omega, axis=1)
    # θ = π: both ±axis are valid, keep the one whose first nonzero component is positive
    at_pi = np.abs(theta - np.pi) < 1e-9
    for n in np.flatnonzero(at_pi):
        nz = np.flatnonzero(np.abs(omega[n]) > 1e-12)
        if nz.size and omega[n, nz[0]] < 0:
            omega[n] = -omega[n]
    nu = np.einsum("nij,nj->ni", so3_left_jacobian_inv(omega), trans)
    return np.hstack([omega, nu])


def se3_adjoint(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=float).reshape(-1, 3, 3)
    trans = np.asarray(trans, dtype=float).reshape(-1, 3)
    out = np.zeros((rot.shape[0], 6, 6))
    out[:, :3, :3] = rot
    out[:, 3:, 3:] = rot
    out[:, 3:, :3] = hat(trans) @ rot
    return out


def se3_ad(xi: np.ndarray) -> np.ndarray:
    xi = np.atleast_2d(xi)
    out = np.zeros((xi.shape[0], 6, 6))
    w = hat(xi[:, :3])
    out[:, :3, :3] = w
    out[:, 3:, 3:] = w
    out[:, 3:, :3] = hat(xi[:, 3:])
    return out


def se3_right_jacobian(xi: np.ndarray) -> np.ndarray:
    """J_r(ξ) = Σ (−ad_ξ)^k / (k+1)!, so that Exp(ξ + δ) ≈ Exp(ξ)·Exp(J_r δ)."""
    minus_ad = -se3_ad(xi)
    term = np.broadcast_to(np.eye(6), minus_ad.shape).copy()
    total = term.copy()
    for k in range(1, JACOBIAN_SERIES_TERMS):
        term = term @ minus_ad / (k + 1)
        total = total + term
    return total


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return np.linalg.inv(se3_right_jacobian(xi))


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    elif q[0] == 0:
        nz = np.flatnonzero(np.abs(q[1:]) > 0)
        if nz.size and q[1 + nz[0]] < 0:
            q = -q
    return q


# ═══════════════════════════════════════
# POSE3
# ═══════════════════════════════════════

@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform. `quat` is (w, x, y, z) with w >= 0, `translation` in metres."""

    quat: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", _normalize_quat(self.quat))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose3":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_rt(cls, rot: np.ndarray, trans) -> "Pose3":
        x, y, z, w = Rotation.from_matrix(rot).as_quat()
        return cls(np.array([w, x, y, z]), trans)

    @classmethod
    def from_matrix(cls, mat: np.ndarray) -> "Pose3":
        mat = np.asarray(mat, dtype=float)
        return cls.from_rt(mat[:3, :3], mat[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, trans=(0.0, 0.0, 0.0)) -> "Pose3":
        x, y, z, w = Rotation.from_rotvec(rotvec).as_quat()
        return cls(np.array([w, x, y, z]), trans)

    @classmethod
    def from_yaw(cls, yaw: float, trans=(0.0, 0.0, 0.0)) -> "Pose3":
        return cls.from_rotvec([0.0, 0.0, yaw], trans)

    @property
    def rotation(self) -> Rotation:
        w, x, y, z = self.quat
        return Rotation.from_quat([x, y, z, w])

    @property
    def R(self) -> np.ndarray:
        return self.rotation.as_matrix()

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.R
        mat[:3, 3] = self.translation
        return mat

    def inverse(self) -> "Pose3":
        inv = self.rotation.inv()
        x, y, z, w = inv.as_quat()
        return Pose3(np.array([w, x, y, z]), -inv.apply(self.translation))

    def compose(self, other: "Pose3") -> "Pose3":
        rot = self.rotation * other.rotation
        x, y, z, w = rot.as_quat()
        return Pose3(np.array([w, x, y, z]), self.rotation.apply(other.translation) + self.translation)

    __mul__ = compose

    def between(self, other: "Pose3") -> "Pose3":
        """self⁻¹ ∘ other."""
        return self.inverse().compose(other)

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return points @ self.R.T + self.translation

    def log(self) -> np.ndarray:
        return se3_log_batch(self.R[None], self.translation[None])[0]

    @classmethod
    def exp(cls, xi) -> "Pose3":
        rot, trans = se3_exp_batch(np.asarray(xi, dtype=float)[None])
        return cls.from_rt(rot[0], trans[0])

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(self.rotation.as_rotvec()))

    def yaw(self) -> float:
        return float(self.rotation.as_euler("ZYX")[0])

    def to_xyz_quat(self) -> list[float]:
        """x, y, z, qw, qx, qy, qz."""
        return [*self.translation.tolist(), *self.quat.tolist()]

    def __repr__(self):
        t = np.round(self.translation, 4).tolist()
        q = np.round(self.quat, 6).tolist()
        return f"Pose3(t={t}, q={q})"


def compose(a: Pose3, b: Pose3) -> Pose3:
    return a.compose(b)


def inverse(p: Pose3) -> Pose3:
    return p.inverse()


def log_map(p: Pose3) -> np.ndarray:
    return p.log()


def exp_map(xi) -> Pose3:
    return Pose3.exp(xi)


def poses_to_arrays(poses: list[Pose3]) -> tuple[np.ndarray, np.ndarray]:
    if not poses:
        return np.zeros((0, 3, 3)), np.zeros((0, 3))
    quats = np.array([p.quat for p in poses])
    rot = Rotation.from_quat(quats[:, [1, 2, 3, 0]]).as_matrix()
    trans = np.array([p.translation for p in poses])
    return rot, trans


# ═══════════════════════════════════════
# POINT CLOUDS
# ═══════════════════════════════════════

@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DegenerateInput("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=float).reshape(-1)
            if inten.shape[0] != pts.shape[0]:
                raise DegenerateInput(
                    f"intensity has {inten.shape[0]} values for {pts.shape[0]} points"
                )
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return self.points.shape[0]

    def transformed(self, pose: Pose3) -> "PointCloud":
        return PointCloud(pose.transform_points(self.points), self.intensity)

    def subset(self, idx: np.ndarray) -> "PointCloud":
        inten = None if self.intensity is None else self.intensity[idx]
        return PointCloud(self.points[idx], inten)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Keeps the first point falling in every voxel, in input order."""
    if len(cloud) == 0 or voxel_size <= 0:
        return cloud
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return cloud.subset(np.sort(first))


# ═══════════════════════════════════════
# CLOSED-FORM ALIGNMENT
# ═══════════════════════════════════════

def umeyama_align(source, target) -> Pose3:
    """Rigid transform T minimizing Σ‖T·source_i − target_i‖² (no scale)."""
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    dst = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateInput(f"correspondence count mismatch: {src.shape[0]} vs {dst.shape[0]}")
    if src.shape[0] < 3:
        raise DegenerateInput(f"need at least 3 correspondences, got {src.shape[0]}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    src_c = src - mu_s
    dst_c = dst - mu_d

    sv = np.linalg.svd(src_c, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateInput("correspondences are collinear")

    h = src_c.T @ dst_c
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose3.from_rt(rot, mu_d - rot @ mu_s)


# ═══════════════════════════════════════
# ORIENTED BOUNDING BOX (PCA)
# ═══════════════════════════════════════

@dataclass(frozen=True, eq=False)
class ObbSummary:
    center: np.ndarray
    axes: np.ndarray  # rows are unit axes, ordered by descending extent
    extents: np.ndarray


def _canonical_sign(vec: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    if nz.size and vec[nz[0]] < 0:
        return -vec
    return vec


def oriented_bbox(cloud: PointCloud) -> ObbSummary:
    """PCA box: axes from the covariance eigenvectors, extents from min/max projections.

    Identical points yield extents (0, 0, 0) rather than an error.
    """
    if len(cloud) < 3:
        raise DegenerateInput(f"oriented_bbox needs >= 3 points, got {len(cloud)}")
    pts = cloud.points
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / pts.shape[0]
    _, vecs = np.linalg.eigh(cov)

    proj = centered @ vecs
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    extents = hi - lo
    order = np.argsort(-extents, kind="stable")

    axes = np.array([_canonical_sign(vecs[:, k]) for k in order])
    # sign flips move the projections, recompute the box on the canonical axes
    proj = centered @ axes.T
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    center = mean + axes.T @ ((lo + hi) / 2.0)
    return ObbSummary(center=center, axes=axes, extents=hi - lo)
