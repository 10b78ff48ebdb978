# registration.py
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from errors import ConfigError, DegenerateInput, NoCorrespondences, TooFewPoints
from frontend import OdometryConfig, icp_register
from geom import Pose3, PointCloud, umeyama_align, voxel_downsample
from robustsel import ConsistencyGraph, maximum_cliques

logger = logging.getLogger(__name__)

FPFH_BINS = 11


@dataclass
class RegistrationConfig:
    voxel_size: float = 0.5
    # neighbourhood radii as multiples of the voxel size
    normal_radius_factor: float = 2.0
    feature_radius_factor: float = 5.0
    distance_consistency_eps: float = 0.3
    min_inliers: int = 5
    min_fitness: float = 0.3
    min_points: int = 50
    max_correspondences: int = 200
    mutual_filter: bool = True
    clique_ties: int = 8
    refine_max_dist: float = 1.0
    refine_iterations: int = 30

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ConfigError("registration.voxel_size", "must be > 0")
        if self.distance_consistency_eps <= 0:
            raise ConfigError("registration.distance_consistency_eps", "must be > 0")
        if self.min_inliers < 3:
            raise ConfigError("registration.min_inliers", "must be >= 3")
        if not 0.0 <= self.min_fitness <= 1.0:
            raise ConfigError("registration.min_fitness", "must lie in [0, 1]")
        if self.max_correspondences < 3:
            raise ConfigError("registration.max_correspondences", "must be >= 3")

    @property
    def normal_radius(self) -> float:
        return self.normal_radius_factor * self.voxel_size

    @property
    def feature_radius(self) -> float:
        return self.feature_radius_factor * self.voxel_size


@dataclass(frozen=True, eq=False)
class FpfhFeature:
    histogram: np.ndarray  # 33 bins: θ, α, φ
    index: int


@dataclass(eq=False)
class RegistrationResult:
    pose: Pose3
    inlier_correspondences: int
    fitness: float
    converged: bool
    rmse: float = float("inf")
    source_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    target_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    inliers: list[int] = field(default_factory=list)


# ═══════════════════════════════════════
# NORMALS + FPFH
# ═══════════════════════════════════════

def _neighbour_pairs(tree: cKDTree, points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    nbrs = tree.query_ball_point(points, radius)
    counts = np.array([len(n) for n in nbrs], dtype=int)
    rows = np.repeat(np.arange(points.shape[0]), counts)
    cols = np.concatenate([np.asarray(n, dtype=int) for n in nbrs]) if counts.sum() else np.zeros(0, dtype=int)
    return rows, cols


def estimate_normals(cloud: PointCloud, radius: float) -> np.ndarray:
    """PCA normals pointing toward the sensor origin; NaN rows mark points with < 3 neighbours."""
    if radius <= 0:
        raise ConfigError("registration.normal_radius", "must be > 0")
    pts = cloud.points
    n = pts.shape[0]
    normals = np.full((n, 3), np.nan)
    if n == 0:
        return normals
    rows, cols = _neighbour_pairs(cKDTree(pts), pts, radius)
    counts = np.bincount(rows, minlength=n).astype(float)
    sums = np.zeros((n, 3))
    outer = np.zeros((n, 3, 3))
    np.add.at(sums, rows, pts[cols])
    np.add.at(outer, rows, pts[cols, :, None] * pts[cols, None, :])
    valid = counts >= 3
    if not valid.any():
        return normals
    mean = sums[valid] / counts[valid, None]
    cov = outer[valid] / counts[valid, None, None] - mean[:, :, None] * mean[:, None, :]
    _, vecs = np.linalg.eigh(cov)
    est = vecs[:, :, 0]

    toward = -np.einsum("ni,ni->n", est, pts[valid])
    # sensor on the tangent plane: fall back to last nonzero component positive
    ambiguous = np.abs(toward) < 1e-12
    last = np.array([v[np.flatnonzero(np.abs(v) > 1e-12)[-1]] for v in est[ambiguous]]) if ambiguous.any() else []
    flip = np.where(ambiguous, False, toward < 0)
    if ambiguous.any():
        flip[ambiguous] = np.asarray(last) < 0
    est[flip] = -est[flip]
    normals[valid] = est
    return normals


def _pair_features(p1, n1, p2, n2) -> np.ndarray:
    """(θ, α, φ) per pair with the source chosen by the smaller normal/line angle."""
    d = p2 - p1
    dist = np.linalg.norm(d, axis=1)
    safe = np.where(dist > 0, dist, 1.0)
    a1 = np.einsum("ni,ni->n", n1, d) / safe
    a2 = np.einsum("ni,ni->n", n2, d) / safe
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    src_n = np.where(swap[:, None], n2, n1)
    tgt_n = np.where(swap[:, None], n1, n2)
    d = np.where(swap[:, None], -d, d)
    phi = np.where(swap, -a2, a1)

    v = np.cross(d, src_n)
    vnorm = np.linalg.norm(v, axis=1)
    degenerate = (vnorm < 1e-12) | (dist <= 0)
    v = v / np.where(degenerate, 1.0, vnorm)[:, None]
    w = np.cross(src_n, v)
    alpha = np.einsum("ni,ni->n", v, tgt_n)
    theta = np.arctan2(np.einsum("ni,ni->n", w, tgt_n), np.einsum("ni,ni->n", src_n, tgt_n))
    feats = np.stack([theta, alpha, phi], axis=1)
    feats[degenerate] = 0.0
    return feats


def _bin(feats: np.ndarray) -> np.ndarray:
    scaled = np.stack([
        (feats[:, 0] + np.pi) / (2.0 * np.pi),
        (feats[:, 1] + 1.0) / 2.0,
        (feats[:, 2] + 1.0) / 2.0,
    ], axis=1)
    bins = np.clip((scaled * FPFH_BINS).astype(int), 0, FPFH_BINS - 1)
    return bins + np.arange(3) * FPFH_BINS


def fpfh_matrix(cloud: PointCloud, normals: np.ndarray, radius: float) -> np.ndarray:
    """(N, 33) FPFH histograms, L1-normalised; zero rows for invalid or isolated points."""
    pts = cloud.points
    n = pts.shape[0]
    hist = np.zeros((n, 3 * FPFH_BINS))
    if n == 0:
        return hist
    valid = ~np.isnan(normals).any(axis=1)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    if pairs.size:
        pairs = pairs[valid[pairs[:, 0]] & valid[pairs[:, 1]]]
    if pairs.size == 0:
        return hist
    i, j = pairs[:, 0], pairs[:, 1]
    cols = _bin(_pair_features(pts[i], normals[i], pts[j], normals[j]))

    # SPFH: per-point sub-histograms normalised by neighbour count
    spfh = np.zeros_like(hist)
    for a in (i, j):
        for c in range(3):
            np.add.at(spfh, (a, cols[:, c]), 1.0)
    degree = np.bincount(np.concatenate([i, j]), minlength=n).astype(float)
    has = degree > 0
    spfh[has] /= degree[has, None]

    # FPFH = SPFH(p) + 1/k Σ SPFH(q) / ‖p − q‖
    dist = np.maximum(np.linalg.norm(pts[i] - pts[j], axis=1), 1e-12)
    agg = np.zeros_like(hist)
    np.add.at(agg, i, spfh[j] / dist[:, None])
    np.add.at(agg, j, spfh[i] / dist[:, None])
    agg[has] /= degree[has, None]
    hist = spfh + agg
    total = hist.sum(axis=1)
    nz = total > 0
    hist[nz] /= total[nz, None]
    hist[~valid] = 0.0
    return hist


def fpfh(cloud: PointCloud, normals: np.ndarray, radius: float) -> list[FpfhFeature]:
    return [FpfhFeature(histogram=row, index=k) for k, row in enumerate(fpfh_matrix(cloud, normals, radius))]


# ═══════════════════════════════════════
# GLOBAL REGISTRATION
# ═══════════════════════════════════════

def _correspondences(src_feat: np.ndarray, tgt_feat: np.ndarray, cfg: RegistrationConfig) -> np.ndarray:
    src_idx = np.flatnonzero(src_feat.sum(axis=1) > 0)
    tgt_idx = np.flatnonzero(tgt_feat.sum(axis=1) > 0)
    if src_idx.size == 0 or tgt_idx.size == 0:
        return np.zeros((0, 2), dtype=int)
    fwd_dist, fwd = cKDTree(tgt_feat[tgt_idx]).query(src_feat[src_idx])
    pairs = np.stack([src_idx, tgt_idx[fwd]], axis=1)
    if cfg.mutual_filter:
        _, back = cKDTree(src_feat[src_idx]).query(tgt_feat[tgt_idx])
        mutual = src_idx[back[fwd]] == src_idx
        pairs, fwd_dist = pairs[mutual], fwd_dist[mutual]
    order = np.lexsort((pairs[:, 0], fwd_dist))
    return pairs[order[: cfg.max_correspondences]]


def length_consistency(src_pts: np.ndarray, tgt_pts: np.ndarray, eps: float) -> ConsistencyGraph:
    ds = np.linalg.norm(src_pts[:, None] - src_pts[None], axis=2)
    dt = np.linalg.norm(tgt_pts[:, None] - tgt_pts[None], axis=2)
    adj = np.abs(ds - dt) <= eps
    return ConsistencyGraph(vertices=list(range(src_pts.shape[0])), adjacency=adj, gamma=eps)


def _not_converged(src_pts=None, tgt_pts=None) -> RegistrationResult:
    return RegistrationResult(
        pose=Pose3.identity(), inlier_correspondences=0, fitness=0.0, converged=False,
        source_points=src_pts if src_pts is not None else np.zeros((0, 3)),
        target_points=tgt_pts if tgt_pts is not None else np.zeros((0, 3)),
    )


def global_register(source: PointCloud, target: PointCloud, cfg: Optional[RegistrationConfig] = None) -> RegistrationResult:
    """Initialisation-free source→target registration: FPFH matches, max-clique inliers, ICP refine."""
    cfg = cfg or RegistrationConfig()
    src = voxel_downsample(source, cfg.voxel_size)
    tgt = voxel_downsample(target, cfg.voxel_size)
    if len(src) < cfg.min_points or len(tgt) < cfg.min_points:
        raise TooFewPoints(f"{len(src)} source / {len(tgt)} target points after downsampling, need {cfg.min_points}")

    src_feat = fpfh_matrix(src, estimate_normals(src, cfg.normal_radius), cfg.feature_radius)
    tgt_feat = fpfh_matrix(tgt, estimate_normals(tgt, cfg.normal_radius), cfg.feature_radius)
    pairs = _correspondences(src_feat, tgt_feat, cfg)
    src_pts, tgt_pts = src.points[pairs[:, 0]], tgt.points[pairs[:, 1]]
    if pairs.shape[0] < 3:
        return _not_converged(src_pts, tgt_pts)

    graph = length_consistency(src_pts, tgt_pts, cfg.distance_consistency_eps)
    best = None
    for clique in maximum_cliques(graph, limit=cfg.clique_ties, max_vertices=max(cfg.max_correspondences, 500)):
        if len(clique) < 3:
            continue
        try:
            pose = umeyama_align(src_pts[clique], tgt_pts[clique])
        except DegenerateInput:
            continue
        err = pose.transform_points(src_pts[clique]) - tgt_pts[clique]
        rmse = float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))
        if best is None or rmse < best[2]:
            best = (clique, pose, rmse)
    if best is None:
        return _not_converged(src_pts, tgt_pts)
    clique, pose, rmse = best

    refine_cfg = OdometryConfig(
        max_correspondence_dist=cfg.refine_max_dist,
        voxel_size=cfg.voxel_size,
        max_iterations=cfg.refine_iterations,
    )
    try:
        refined = icp_register(src, tgt, pose, refine_cfg)
        pose, fitness, rmse = refined.pose, refined.fitness, refined.rmse
    except NoCorrespondences:
        fitness = 0.0
    converged = len(clique) >= cfg.min_inliers and fitness >= cfg.min_fitness
    logger.debug(
        f"Registration: {pairs.shape[0]} correspondences, clique {len(clique)}, fitness {fitness:.3f}, "
        f"converged={converged}"
    )
    return RegistrationResult(
        pose=pose,
        inlier_correspondences=len(clique),
        fitness=float(fitness),
        converged=bool(converged),
        rmse=float(rmse),
        source_points=src_pts,
        target_points=tgt_pts,
        inliers=list(clique),
    )
