# placerec.py
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from errors import ConfigError, EmptyCloud, ShapeMismatch
from frontend import KeyFrame
from geom import PointCloud

logger = logging.getLogger(__name__)

# float rounding margin when pruning with the column bound
BOUND_SLACK = 1e-9


@dataclass
class PlaceRecConfig:
    rings: int = 20
    sectors: int = 60
    max_range: float = 80.0
    threshold: float = 0.7
    # added to z before binning so floor returns land at >= 0
    sensor_height: float = 4.0
    # ring-key neighbours compared first; 0 compares in pool order
    prefilter_k: int = 10
    mutual_best: bool = False

    def __post_init__(self):
        if self.rings < 1 or self.sectors < 1:
            raise ConfigError("placerec.rings", "rings and sectors must be >= 1")
        if self.max_range <= 0:
            raise ConfigError("placerec.max_range", "must be > 0")
        if not 0.0 <= self.threshold <= 1.0 + 1e-12:
            raise ConfigError("placerec.threshold", "must lie in [0, 1]")
        if self.prefilter_k < 0:
            raise ConfigError("placerec.prefilter_k", "must be >= 0")


@dataclass(frozen=True, eq=False)
class ScanContext:
    matrix: np.ndarray  # rings x sectors, 0 = empty bin
    rings: int
    sectors: int
    max_range: float
    ring_key: np.ndarray

    @property
    def empty(self) -> bool:
        return not np.any(self.matrix > 0)

    @property
    def occupied_columns(self) -> int:
        return int(np.count_nonzero(np.linalg.norm(self.matrix, axis=0) > 0))


@dataclass(frozen=True)
class LoopCandidate:
    kf_a: tuple[int, int]
    kf_b: tuple[int, int]
    similarity: float
    sector_shift: int


# ═══════════════════════════════════════
# DESCRIPTOR
# ═══════════════════════════════════════

def scan_context(cloud: PointCloud, rings: int = 20, sectors: int = 60, max_range: float = 80.0,
                 sensor_height: float = 0.0) -> ScanContext:
    if len(cloud) == 0:
        raise EmptyCloud("scan_context on an empty cloud")
    pts = cloud.points
    radius = np.hypot(pts[:, 0], pts[:, 1])
    keep = radius <= max_range
    pts, radius = pts[keep], radius[keep]

    ring = np.minimum((radius / max_range * rings).astype(int), rings - 1)
    azimuth = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
    sector = np.minimum((azimuth / (2.0 * np.pi) * sectors).astype(int), sectors - 1)
    height = np.maximum(pts[:, 2] + sensor_height, 0.0)

    matrix = np.zeros((rings, sectors))
    np.maximum.at(matrix, (ring, sector), height)
    ring_key = (matrix > 0).sum(axis=1) / sectors
    return ScanContext(matrix=matrix, rings=rings, sectors=sectors, max_range=max_range, ring_key=ring_key)


def sc_distance(a: ScanContext, b: ScanContext) -> tuple[float, int]:
    """Minimum over circular column shifts of the mean column cosine distance.

    Shift s pairs column j of a with column (j + s) mod sectors of b, so b = roll(a, k) yields shift k.
    """
    if a.matrix.shape != b.matrix.shape:
        raise ShapeMismatch(f"descriptor shapes {a.matrix.shape} and {b.matrix.shape} differ")
    n = a.sectors
    idx = (np.arange(n)[:, None] + np.arange(n)[None, :]) % n  # [shift, column]
    shifted = b.matrix[:, idx]  # [ring, shift, column]

    norm_a = np.linalg.norm(a.matrix, axis=0)
    norm_b = np.linalg.norm(b.matrix, axis=0)[idx]
    dots = np.einsum("rj,rsj->sj", a.matrix, shifted)

    occ_a = np.broadcast_to(norm_a > 0, idx.shape)
    occ_b = norm_b > 0
    both = occ_a & occ_b
    either = occ_a | occ_b
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(both, dots / (norm_a[None, :] * norm_b), 0.0)
    col_dist = np.where(both, 1.0 - cos, 1.0)
    counts = either.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_shift = np.where(counts > 0, np.where(either, col_dist, 0.0).sum(axis=1) / counts, 1.0)
    shift = int(np.argmin(per_shift))
    return float(np.clip(per_shift[shift], 0.0, 1.0)), shift


def describe_keyframes(keyframes: list[KeyFrame], cfg: PlaceRecConfig) -> list[KeyFrame]:
    out = []
    for kf in keyframes:
        if len(kf.cloud) == 0:
            sc = ScanContext(np.zeros((cfg.rings, cfg.sectors)), cfg.rings, cfg.sectors, cfg.max_range,
                             np.zeros(cfg.rings))
        else:
            sc = scan_context(kf.cloud, cfg.rings, cfg.sectors, cfg.max_range, cfg.sensor_height)
        out.append(replace(kf, descriptor=sc))
    return out


# ═══════════════════════════════════════
# MATCHING
# ═══════════════════════════════════════

def _descriptor(kf: KeyFrame, cfg: PlaceRecConfig) -> ScanContext:
    if kf.descriptor is not None:
        return kf.descriptor
    return describe_keyframes([kf], cfg)[0].descriptor


def _column_bound(a: ScanContext, b: ScanContext) -> float:
    """Shift-independent lower bound on sc_distance from occupied column counts."""
    na, nb = a.occupied_columns, b.occupied_columns
    most = max(na, nb)
    return 0.0 if most == 0 else 1.0 - min(na, nb) / most


def _best_match(query: ScanContext, pool: list[ScanContext], tree: Optional[cKDTree], k: int,
                threshold: float) -> Optional[tuple[int, float, int]]:
    """(pool index, similarity, shift) of the closest descriptor, or None below threshold.

    The ring-key tree only decides which descriptors are compared first; every other one is
    still compared unless the column bound rules it out, so the answer equals brute force
    (ties go to the lowest pool index).
    """
    if query.empty or not pool:
        return None
    order = list(range(len(pool)))
    if tree is not None and k > 0:
        _, near = tree.query(query.ring_key, k=min(k, len(pool)))
        first = sorted({int(i) for i in np.atleast_1d(near) if int(i) < len(pool)})
        order = first + sorted(set(order) - set(first))

    limit = 1.0 - threshold
    best = None
    for i in order:
        if pool[i].empty:
            continue
        bound = _column_bound(query, pool[i]) - BOUND_SLACK
        if bound > limit or (best is not None and bound > best[1]):
            continue
        dist, shift = sc_distance(query, pool[i])
        if best is None or (dist, i) < (best[1], best[0]):
            best = (i, dist, shift)
    if best is None or 1.0 - best[1] < threshold:
        return None
    return best[0], 1.0 - best[1], best[2]


def match_keyframes(kfs_a: list[KeyFrame], kfs_b: list[KeyFrame], threshold: float, use_filter: bool,
                    cfg: Optional[PlaceRecConfig] = None) -> list[LoopCandidate]:
    """For each robot-A keyframe, the most similar robot-B keyframe at or above threshold."""
    cfg = cfg or PlaceRecConfig()
    a_kfs = [kf for kf in kfs_a if kf.informative or not use_filter]
    b_kfs = [kf for kf in kfs_b if kf.informative or not use_filter]
    a_desc = [_descriptor(kf, cfg) for kf in a_kfs]
    b_desc = [_descriptor(kf, cfg) for kf in b_kfs]

    b_tree = cKDTree(np.stack([d.ring_key for d in b_desc])) if b_desc and cfg.prefilter_k > 0 else None
    a_tree = cKDTree(np.stack([d.ring_key for d in a_desc])) if a_desc and cfg.prefilter_k > 0 else None

    candidates = []
    for kf, desc in zip(a_kfs, a_desc):
        found = _best_match(desc, b_desc, b_tree, cfg.prefilter_k, threshold)
        if found is None:
            continue
        j, similarity, shift = found
        if cfg.mutual_best:
            back = _best_match(b_desc[j], a_desc, a_tree, cfg.prefilter_k, threshold)
            if back is None or a_kfs[back[0]] is not kf:
                continue
        candidates.append(
            LoopCandidate(kf_a=kf.key, kf_b=b_kfs[j].key, similarity=similarity, sector_shift=shift)
        )

    logger.info(
        f"Place recognition {a_kfs[0].robot if a_kfs else '?'}->{b_kfs[0].robot if b_kfs else '?'}: "
        f"{len(candidates)} candidates from {len(a_kfs)}x{len(b_kfs)} keyframes (filter={use_filter})"
    )
    return candidates
