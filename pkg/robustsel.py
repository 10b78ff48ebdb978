# robustsel.py
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Hashable, Optional, Sequence

import numpy as np
from scipy.stats import chi2

from errors import ConfigError, MissingOdometrySpan, SizeLimit
from geom import Pose3
from graphcore import Edge, NodeKey, PoseGraph

logger = logging.getLogger(__name__)

DEFAULT_GAMMA = float(chi2.ppf(0.99, 6))
DEFAULT_MAX_VERTICES = 500


@dataclass
class PcmConfig:
    gamma: float = DEFAULT_GAMMA
    max_vertices: int = DEFAULT_MAX_VERTICES

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("pcm.gamma", "must be > 0")
        if self.max_vertices < 1:
            raise ConfigError("pcm.max_vertices", "must be >= 1")


@dataclass(eq=False)
class ConsistencyGraph:
    vertices: list[Hashable]
    adjacency: np.ndarray  # symmetric bool, false diagonal
    gamma: float = DEFAULT_GAMMA
    values: Optional[np.ndarray] = None

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool).reshape(len(self.vertices), len(self.vertices))
        adj = adj | adj.T
        np.fill_diagonal(adj, False)
        self.adjacency = adj

    @classmethod
    def from_edges(cls, n: int, pairs, gamma: float = DEFAULT_GAMMA) -> "ConsistencyGraph":
        adj = np.zeros((n, n), dtype=bool)
        for a, b in pairs:
            adj[a, b] = adj[b, a] = True
        return cls(vertices=list(range(n)), adjacency=adj, gamma=gamma)

    def is_clique(self, members: Sequence[int]) -> bool:
        idx = [self.vertices.index(v) for v in members]
        sub = self.adjacency[np.ix_(idx, idx)]
        return bool(np.all(sub | np.eye(len(idx), dtype=bool)))


# ═══════════════════════════════════════
# ODOMETRY CHAINS
# ═══════════════════════════════════════

class OdometryChain:
    """Relative poses along one robot's odometry edges, with summed local-frame covariances."""

    def __init__(self, robot: int, steps: list[Edge]):
        self.robot = robot
        self.position: dict[NodeKey, int] = {}
        self.segment: dict[NodeKey, int] = {}
        self.prefix_pose: list[Pose3] = []
        self.prefix_cov: list[np.ndarray] = []
        for e in sorted(steps, key=lambda e: e.frm):
            if e.frm not in self.position or self.position[e.frm] != len(self.prefix_pose) - 1:
                # a gap starts a new segment; spans across segments are missing
                self._start(e.frm)
            self.position[e.to] = len(self.prefix_pose)
            self.segment[e.to] = self.segment[e.frm]
            self.prefix_pose.append(self.prefix_pose[-1].compose(e.measurement))
            self.prefix_cov.append(self.prefix_cov[-1] + e.covariance)

    def _start(self, key: NodeKey):
        self.position[key] = len(self.prefix_pose)
        self.segment[key] = len(set(self.segment.values()))
        self.prefix_pose.append(Pose3.identity())
        self.prefix_cov.append(np.zeros((6, 6)))

    @classmethod
    def from_graph(cls, graph: PoseGraph, robot: int) -> "OdometryChain":
        chain = cls(robot, [e for e in graph.odometry_edges() if e.frm[0] == robot])
        for key in graph.robot_nodes(robot):
            if key not in chain.position:
                chain._start(key)
        return chain

    def relative(self, a: NodeKey, b: NodeKey) -> tuple[Pose3, np.ndarray]:
        """Pose of b in a's frame and its covariance."""
        if a not in self.position or b not in self.position or self.segment[a] != self.segment[b]:
            raise MissingOdometrySpan(f"robot {self.robot}: no odometry span {a} -> {b}")
        pa, pb = self.position[a], self.position[b]
        cov = self.prefix_cov[max(pa, pb)] - self.prefix_cov[min(pa, pb)]
        return self.prefix_pose[pa].between(self.prefix_pose[pb]), cov


# ═══════════════════════════════════════
# PAIRWISE CONSISTENCY
# ═══════════════════════════════════════

def pairwise_consistency(z_ik: Edge, z_jl: Edge, odom_a: OdometryChain, odom_b: OdometryChain) -> float:
    """Squared Mahalanobis norm of the loop cycle z_ik⁻¹ ∘ odomA(i→j) ∘ z_jl ∘ odomB(l→k)."""
    if (z_jl.frm, z_jl.to) < (z_ik.frm, z_ik.to):
        z_ik, z_jl = z_jl, z_ik
    i, k = z_ik.frm, z_ik.to
    j, l = z_jl.frm, z_jl.to
    a_ij, cov_a = odom_a.relative(i, j)
    b_lk, cov_b = odom_b.relative(l, k)
    cycle = z_ik.measurement.inverse().compose(a_ij).compose(z_jl.measurement).compose(b_lk)
    e = cycle.log()
    cov = z_ik.covariance + cov_a + z_jl.covariance + cov_b
    return float(e @ np.linalg.solve(cov, e))


def consistency_graph(loops: list[Edge], odom_a: OdometryChain, odom_b: OdometryChain,
                      gamma: float = DEFAULT_GAMMA) -> ConsistencyGraph:
    n = len(loops)
    values = np.zeros((n, n))
    for a in range(n):
        for b in range(a + 1, n):
            values[a, b] = values[b, a] = pairwise_consistency(loops[a], loops[b], odom_a, odom_b)
    adj = values <= gamma
    return ConsistencyGraph(vertices=list(range(n)), adjacency=adj, gamma=gamma, values=values)


# ═══════════════════════════════════════
# MAXIMUM CLIQUE (bitset branch-and-bound, greedy-colouring bound)
# ═══════════════════════════════════════

def _bits(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


def _colour_suffix_bounds(order: list[int], neigh: list[int]) -> list[int]:
    """bound[p] = number of distinct greedy colours among order[p:]."""
    classes: list[int] = []
    colour = []
    for v in order:
        for c, members in enumerate(classes):
            if not members & neigh[v]:
                classes[c] |= 1 << v
                colour.append(c)
                break
        else:
            classes.append(1 << v)
            colour.append(len(classes) - 1)
    bounds = [0] * (len(order) + 1)
    seen: set[int] = set()
    for p in range(len(order) - 1, -1, -1):
        seen.add(colour[p])
        bounds[p] = len(seen)
    return bounds


def _neighbours(graph: ConsistencyGraph, cap: int) -> list[int]:
    n = len(graph.vertices)
    if n > cap:
        raise SizeLimit(f"consistency graph has {n} vertices, cap is {cap}")
    return [sum(1 << int(u) for u in np.flatnonzero(graph.adjacency[v])) for v in range(n)]


def _search(neigh: list[int], target: Optional[int], limit: int) -> list[list[int]]:
    """Cliques in lexicographic order of their sorted index lists.

    target None: one maximum clique (the lexicographically smallest);
    target k: up to limit cliques of size exactly k.
    """
    found: list[list[int]] = []
    best: list[int] = []

    def expand(clique: list[int], cand: int) -> bool:
        nonlocal best
        if not cand:
            if target is None:
                if len(clique) > len(best):
                    best = list(clique)
            elif len(clique) == target:
                found.append(list(clique))
                return len(found) >= limit
            return False
        order = _bits(cand)
        bounds = _colour_suffix_bounds(order, neigh)
        rest = cand
        for pos, v in enumerate(order):
            if target is None:
                if len(clique) + bounds[pos] <= len(best):
                    return False
            elif len(clique) + bounds[pos] < target:
                return False
            rest &= ~(1 << v)
            clique.append(v)
            stop = expand(clique, rest & neigh[v])
            clique.pop()
            if stop:
                return True
        return False

    n = len(neigh)
    if n == 0:
        return [[]]
    expand([], (1 << n) - 1)
    return [best] if target is None else found


def max_clique(graph: ConsistencyGraph, max_vertices: int = DEFAULT_MAX_VERTICES) -> list:
    """Exact maximum clique; ties resolve to the lexicographically smallest vertex-index set."""
    neigh = _neighbours(graph, max_vertices)
    best = _search(neigh, None, 1)[0]
    return [graph.vertices[v] for v in best]


def maximum_cliques(graph: ConsistencyGraph, limit: int = 16, max_vertices: int = DEFAULT_MAX_VERTICES) -> list[list]:
    """All maximum cliques (up to limit) in lexicographic order."""
    neigh = _neighbours(graph, max_vertices)
    size = len(_search(neigh, None, 1)[0])
    if size == 0:
        return [[]]
    return [[graph.vertices[v] for v in c] for c in _search(neigh, size, limit)]


# ═══════════════════════════════════════
# PCM
# ═══════════════════════════════════════

def pcm_filter(loops: list[Edge], odom_a: OdometryChain, odom_b: OdometryChain,
               gamma: float = DEFAULT_GAMMA, max_vertices: int = DEFAULT_MAX_VERTICES) -> list[Edge]:
    if not loops:
        return []
    graph = consistency_graph(loops, odom_a, odom_b, gamma)
    keep = set(max_clique(graph, max_vertices))
    kept = [e for n, e in enumerate(loops) if n in keep]
    logger.info(f"PCM robots {odom_a.robot}-{odom_b.robot}: kept {len(kept)}/{len(loops)} loops (gamma={gamma:.3f})")
    return kept
