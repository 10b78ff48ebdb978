# graphcore.py
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

import networkx as nx
import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.stats import chi2

from errors import ConfigError, DatasetError, Disconnected, InvalidSpec, MissingNode, NotPositiveDefinite, ParseError
from fileio import fmt
from geom import Pose3, poses_to_arrays, se3_adjoint, se3_exp_batch, se3_log_batch, se3_right_jacobian_inv

logger = logging.getLogger(__name__)

NodeKey = tuple[int, int]

ODOMETRY = "odometry"
INTER_ROBOT = "inter_robot"
EDGE_KINDS = (ODOMETRY, INTER_ROBOT)
CATEGORIES = ("correct", "wrong_pr", "wrong_pcr", "unknown")

# (ω, ν) ordering: rotation rad⁻², then translation m⁻²
ODOMETRY_INFORMATION = np.diag([400.0, 400.0, 400.0, 100.0, 100.0, 100.0])

NODE_ID_STRIDE = 1_000_000
# internal (ω, ν) <-> g2o (translation, rotation); the permutation is its own inverse
G2O_PERMUTATION = [3, 4, 5, 0, 1, 2]


def check_information(info) -> np.ndarray:
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise NotPositiveDefinite(f"information must be 6x6, got {info.shape}")
    if not np.allclose(info, info.T, atol=1e-9, rtol=0.0):
        raise NotPositiveDefinite("information matrix is not symmetric")
    try:
        np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("information matrix is not positive-definite")
    return info


def node_id(key: NodeKey) -> int:
    return key[0] * NODE_ID_STRIDE + key[1]


def node_key(nid: int) -> NodeKey:
    robot, index = divmod(int(nid), NODE_ID_STRIDE)
    return (robot, index)


# ═══════════════════════════════════════
# GRAPH MODEL
# ═══════════════════════════════════════

@dataclass(frozen=True, eq=False)
class Edge:
    frm: NodeKey
    to: NodeKey
    measurement: Pose3
    information: np.ndarray
    kind: str = ODOMETRY
    category: str = "unknown"
    gnc_weight: float = 1.0
    similarity: float = float("nan")
    fitness: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "frm", (int(self.frm[0]), int(self.frm[1])))
        object.__setattr__(self, "to", (int(self.to[0]), int(self.to[1])))
        object.__setattr__(self, "information", check_information(self.information))
        if self.kind not in EDGE_KINDS:
            raise InvalidSpec("edge.kind", f"unknown kind {self.kind!r}")
        if self.category not in CATEGORIES:
            raise InvalidSpec("edge.category", f"unknown category {self.category!r}")
        if self.kind == ODOMETRY and self.category == "unknown":
            object.__setattr__(self, "category", "correct")

    @property
    def covariance(self) -> np.ndarray:
        return np.linalg.inv(self.information)


@dataclass(eq=False)
class PoseGraph:
    nodes: dict[NodeKey, Pose3] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)

    def add_node(self, key: NodeKey, pose: Pose3):
        self.nodes[(int(key[0]), int(key[1]))] = pose

    def add_edge(self, edge: Edge):
        for key in (edge.frm, edge.to):
            if key not in self.nodes:
                raise MissingNode(f"edge endpoint {key} is not a node")
        if edge.kind == ODOMETRY and (edge.frm[0] != edge.to[0] or edge.to[1] <= edge.frm[1]):
            raise InvalidSpec("edge", f"odometry edge {edge.frm}->{edge.to} must advance along one robot")
        self.edges.append(edge)

    def robots(self) -> list[int]:
        return sorted({k[0] for k in self.nodes})

    def robot_nodes(self, robot: int) -> list[NodeKey]:
        return sorted(k for k in self.nodes if k[0] == robot)

    def odometry_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.kind == ODOMETRY]

    def inter_edges(self) -> list[Edge]:
        return [e for e in self.edges if e.kind == INTER_ROBOT]

    def anchor(self) -> Optional[NodeKey]:
        return min(self.nodes) if self.nodes else None

    def validate(self):
        """Odometry edges form one simple chain per robot over its sorted nodes."""
        successor = {}
        for robot in self.robots():
            keys = self.robot_nodes(robot)
            successor.update(zip(keys[:-1], keys[1:]))
        seen = set()
        for e in self.odometry_edges():
            if successor.get(e.frm) != e.to:
                raise InvalidSpec("edge", f"odometry edge {e.frm}->{e.to} skips or breaks the chain")
            if e.frm in seen:
                raise InvalidSpec("edge", f"node {e.frm} has two outgoing odometry edges")
            seen.add(e.frm)

    def copy(self) -> "PoseGraph":
        return PoseGraph(nodes=dict(self.nodes), edges=list(self.edges))

    def with_solution(self, result: "OptimizeResult") -> "PoseGraph":
        edges = [replace(e, gnc_weight=float(w)) for e, w in zip(self.edges, result.edge_weights)]
        return PoseGraph(nodes=dict(result.poses), edges=edges)

    def chi2(self, weights: Optional[np.ndarray] = None) -> float:
        if not self.edges:
            return 0.0
        r2 = np.array([_mahalanobis(residual(e, self.nodes), e.information) for e in self.edges])
        w = np.ones(len(self.edges)) if weights is None else np.asarray(weights, dtype=float)
        return float(np.sum(w * r2))


def _mahalanobis(r: np.ndarray, info: np.ndarray) -> float:
    return float(r @ info @ r)


# ═══════════════════════════════════════
# RESIDUALS + JACOBIANS (right perturbation T ← T·Exp(δ))
# ═══════════════════════════════════════

def _edge_terms(rot, trans, ii, jj, zrot, ztrans, jacobians: bool = True):
    ri, rj = rot[ii], rot[jj]
    ti, tj = trans[ii], trans[jj]
    rel_r = np.einsum("nji,njk->nik", ri, rj)
    rel_t = np.einsum("nji,nj->ni", ri, tj - ti)
    err_r = np.einsum("nji,njk->nik", zrot, rel_r)
    err_t = np.einsum("nji,nj->ni", zrot, rel_t - ztrans)
    r = se3_log_batch(err_r, err_t)
    if not jacobians:
        return r, None, None
    jr_inv = se3_right_jacobian_inv(r)
    # Tj⁻¹·Ti
    ji_r = np.einsum("nji,njk->nik", rj, ri)
    ji_t = np.einsum("nji,nj->ni", rj, ti - tj)
    j_to = jr_inv
    j_from = -jr_inv @ se3_adjoint(ji_r, ji_t)
    return r, j_from, j_to


def _single_edge_terms(edge: Edge, poses: Mapping[NodeKey, Pose3], jacobians: bool):
    for key in (edge.frm, edge.to):
        if key not in poses:
            raise MissingNode(f"node {key} has no pose")
    rot, trans = poses_to_arrays([poses[edge.frm], poses[edge.to]])
    zrot, ztrans = poses_to_arrays([edge.measurement])
    return _edge_terms(rot, trans, np.array([0]), np.array([1]), zrot, ztrans, jacobians)


def residual(edge: Edge, poses: Mapping[NodeKey, Pose3]) -> np.ndarray:
    """log(Z⁻¹ ∘ T_from⁻¹ ∘ T_to); zero iff the relative pose matches the measurement."""
    return _single_edge_terms(edge, poses, jacobians=False)[0][0]


def residual_jacobians(edge: Edge, poses: Mapping[NodeKey, Pose3]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, j_from, j_to = _single_edge_terms(edge, poses, jacobians=True)
    return r[0], j_from[0], j_to[0]


# ═══════════════════════════════════════
# OPTIMIZER
# ═══════════════════════════════════════

@dataclass
class OptimizeConfig:
    robust: str = "gnc_tls"  # none | gnc_tls
    barc2: float = float(chi2.ppf(0.997, 6))
    mu_update: float = 1.4
    max_outer: int = 30
    pin_odometry: bool = True
    max_inner: int = 50
    lm_lambda0: float = 1e-4
    convergence_eps: float = 1e-10
    # Σ w(1−w) below this counts as binary weights
    weight_eps: float = 1e-6

    def __post_init__(self):
        if self.robust not in ("none", "gnc_tls"):
            raise ConfigError("optimize.robust", f"unknown mode {self.robust!r}")
        if self.mu_update <= 1.0:
            raise ConfigError("optimize.mu_update", "must be > 1")
        if self.barc2 <= 0:
            raise ConfigError("optimize.barc2", "must be > 0")
        if self.max_inner < 1 or self.max_outer < 1:
            raise ConfigError("optimize.max_inner", "iteration limits must be >= 1")
        if self.lm_lambda0 <= 0:
            raise ConfigError("optimize.lm_lambda0", "must be > 0")


@dataclass(frozen=True)
class GncStep:
    """State after one GNC outer step; cost is the truncated least-squares objective."""
    mu: float
    cost: float
    binary: bool


@dataclass
class OptimizeResult:
    poses: dict[NodeKey, Pose3]
    final_chi2: float
    edge_weights: list[float]
    iterations: int = 0
    converged: bool = True
    # accepted-step chi-square values of every LM run
    lm_history: list[float] = field(default_factory=list)
    gnc_history: list[GncStep] = field(default_factory=list)


def tls_weights(r2: np.ndarray, mu: float, barc2: float) -> np.ndarray:
    r2 = np.asarray(r2, dtype=float)
    lower = mu / (mu + 1.0) * barc2
    upper = (mu + 1.0) / mu * barc2
    safe = np.sqrt(np.maximum(r2, 1e-300))
    middle = np.sqrt(barc2) / safe * np.sqrt(mu * (mu + 1.0)) - mu
    w = np.where(r2 <= lower, 1.0, np.where(r2 >= upper, 0.0, middle))
    return np.clip(w, 0.0, 1.0)


class _Problem:
    def __init__(self, graph: PoseGraph, anchor: NodeKey):
        self.keys = sorted(graph.nodes)
        index = {k: n for n, k in enumerate(self.keys)}
        self.ii = np.array([index[e.frm] for e in graph.edges], dtype=int)
        self.jj = np.array([index[e.to] for e in graph.edges], dtype=int)
        self.zrot, self.ztrans = poses_to_arrays([e.measurement for e in graph.edges])
        self.info = np.array([e.information for e in graph.edges]).reshape(-1, 6, 6)
        self.var = np.full(len(self.keys), -1, dtype=int)
        free = [n for n, k in enumerate(self.keys) if k != anchor]
        self.var[free] = np.arange(len(free))
        self.nvar = 6 * len(free)

    def chi2_terms(self, rot, trans) -> np.ndarray:
        if self.ii.size == 0:
            return np.zeros(0)
        r, _, _ = _edge_terms(rot, trans, self.ii, self.jj, self.zrot, self.ztrans, jacobians=False)
        return np.einsum("ni,nij,nj->n", r, self.info, r)

    def normal_equations(self, rot, trans, weights):
        r, j_from, j_to = _edge_terms(rot, trans, self.ii, self.jj, self.zrot, self.ztrans)
        omega = self.info * weights[:, None, None]
        rows, cols, data = [], [], []
        b = np.zeros(self.nvar)
        blocks = ((self.ii, j_from), (self.jj, j_to))
        six = np.arange(6)
        for na, ja in blocks:
            grad = np.einsum("nki,nkl,nl->ni", ja, omega, r)
            ok = self.var[na] >= 0
            np.add.at(b, (self.var[na][ok, None] * 6 + six[None, :]), grad[ok])
            for nb, jb in blocks:
                h = np.einsum("nki,nkl,nlj->nij", ja, omega, jb)
                both = ok & (self.var[nb] >= 0)
                ra = self.var[na][both, None, None] * 6 + six[None, :, None]
                cb = self.var[nb][both, None, None] * 6 + six[None, None, :]
                rows.append(np.broadcast_to(ra, h[both].shape).ravel())
                cols.append(np.broadcast_to(cb, h[both].shape).ravel())
                data.append(h[both].ravel())
        hess = sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(self.nvar, self.nvar)
        ).tocsc()
        return hess, b

    def retract(self, rot, trans, delta):
        step = np.zeros((len(self.keys), 6))
        free = self.var >= 0
        step[free] = delta.reshape(-1, 6)[self.var[free]]
        drot, dtrans = se3_exp_batch(step)
        return rot @ drot, trans + np.einsum("nij,nj->ni", rot, dtrans)


def _levenberg_marquardt(problem: _Problem, rot, trans, weights, cfg: OptimizeConfig, history: list[float]):
    cost = float(np.sum(weights * problem.chi2_terms(rot, trans)))
    lam = cfg.lm_lambda0
    iterations = 0
    converged = problem.nvar == 0 or cost < 1e-30
    while not converged and iterations < cfg.max_inner:
        iterations += 1
        hess, b = problem.normal_equations(rot, trans, weights)
        while True:
            damped = (hess + lam * sparse.identity(problem.nvar, format="csc")).tocsc()
            try:
                delta = -splu(damped).solve(b)
            except RuntimeError as e:
                raise NotPositiveDefinite(f"normal equations are singular: {e}")
            new_rot, new_trans = problem.retract(rot, trans, delta)
            new_cost = float(np.sum(weights * problem.chi2_terms(new_rot, new_trans)))
            if new_cost <= cost:
                break
            lam *= 10.0
            if lam > 1e12:
                return rot, trans, cost, iterations, True
        decrease = cost - new_cost
        rot, trans, cost = new_rot, new_trans, new_cost
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if np.max(np.abs(delta)) < cfg.convergence_eps or decrease <= cfg.convergence_eps * max(cost, 1e-300) \
                or cost < 1e-30:
            converged = True
    return rot, trans, cost, iterations, converged


def _check_connected(graph: PoseGraph, anchor: NodeKey):
    g = nx.Graph()
    g.add_nodes_from(graph.nodes)
    g.add_edges_from((e.frm, e.to) for e in graph.edges)
    reached = nx.node_connected_component(g, anchor)
    if len(reached) != len(graph.nodes):
        missing = sorted(set(graph.nodes) - reached)
        raise Disconnected(f"{len(missing)} nodes unreachable from anchor {anchor}, first {missing[0]}")


def optimize(graph: PoseGraph, cfg: Optional[OptimizeConfig] = None) -> OptimizeResult:
    """LM over all free poses with the lowest (robot, index) node fixed; optional GNC-TLS weighting."""
    cfg = cfg or OptimizeConfig()
    for e in graph.edges:
        check_information(e.information)
        for key in (e.frm, e.to):
            if key not in graph.nodes:
                raise MissingNode(f"edge endpoint {key} is not a node")
    anchor = graph.anchor()
    if anchor is None:
        return OptimizeResult(poses={}, final_chi2=0.0, edge_weights=[])
    _check_connected(graph, anchor)

    problem = _Problem(graph, anchor)
    rot, trans = poses_to_arrays([graph.nodes[k] for k in problem.keys])
    weights = np.ones(len(graph.edges))
    history: list[float] = []

    rot, trans, cost, iterations, converged = _levenberg_marquardt(problem, rot, trans, weights, cfg, history)
    gnc_history: list[GncStep] = []

    kinds = np.array([e.kind for e in graph.edges])
    robust_mask = (kinds != ODOMETRY) if cfg.pin_odometry else np.ones(len(graph.edges), dtype=bool)
    if cfg.robust == "gnc_tls" and robust_mask.any():
        r2 = problem.chi2_terms(rot, trans)
        max_r2 = float(r2[robust_mask].max())
        if max_r2 > cfg.barc2:
            mu = cfg.barc2 / (2.0 * max_r2 - cfg.barc2)
            binary = False
            for _ in range(cfg.max_outer):
                weights[robust_mask] = tls_weights(r2[robust_mask], mu, cfg.barc2)
                rot, trans, cost, inner, converged = _levenberg_marquardt(
                    problem, rot, trans, weights, cfg, history
                )
                iterations += inner
                r2 = problem.chi2_terms(rot, trans)
                binary = float(np.sum(weights * (1.0 - weights))) < cfg.weight_eps
                truncated = np.where(robust_mask, np.minimum(r2, cfg.barc2), r2)
                gnc_history.append(GncStep(mu=mu, cost=float(truncated.sum()), binary=binary))
                if binary:
                    break
                mu *= cfg.mu_update
            if not binary:
                converged = False
                logger.warning(f"GNC did not reach binary weights after {cfg.max_outer} outer steps")
            rejected = int(np.sum(weights[robust_mask] < 0.5))
            logger.info(f"GNC: {rejected}/{int(robust_mask.sum())} robust edges rejected")

    final = float(np.sum(weights * problem.chi2_terms(rot, trans)))
    poses = {k: Pose3.from_rt(rot[n], trans[n]) for n, k in enumerate(problem.keys)}
    logger.info(
        f"Optimized {len(poses)} nodes / {len(graph.edges)} edges: chi2={final:.6g} "
        f"after {iterations} LM iterations ({cfg.robust})"
    )
    return OptimizeResult(
        poses=poses,
        final_chi2=final,
        edge_weights=weights.tolist(),
        iterations=iterations,
        converged=converged,
        lm_history=history,
        gnc_history=gnc_history,
    )


# ═══════════════════════════════════════
# G2O IO
# ═══════════════════════════════════════

def sidecar_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}_edges.csv")


def write_g2o(graph: PoseGraph, path: Path, sidecar: bool = True):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    upper = np.triu_indices(6)
    lines = []
    for key in sorted(graph.nodes):
        p = graph.nodes[key]
        qw, qx, qy, qz = p.quat
        values = [*p.translation, qx, qy, qz, qw]
        lines.append(f"VERTEX_SE3:QUAT {node_id(key)} " + " ".join(fmt(v) for v in values))
    for e in graph.edges:
        m = e.measurement
        qw, qx, qy, qz = m.quat
        info = e.information[G2O_PERMUTATION][:, G2O_PERMUTATION]
        values = [*m.translation, qx, qy, qz, qw, *info[upper]]
        lines.append(f"EDGE_SE3:QUAT {node_id(e.frm)} {node_id(e.to)} " + " ".join(fmt(v) for v in values))
    path.write_text("".join(line + "\n" for line in lines))

    if sidecar:
        with open(sidecar_path(path), "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["id1", "id2", "kind", "category", "gnc_weight"])
            for e in graph.edges:
                writer.writerow([node_id(e.frm), node_id(e.to), e.kind, e.category, fmt(e.gnc_weight)])


def _floats(tokens: list[str], lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as e:
        raise ParseError(lineno, f"bad number: {e}")


def _read_sidecar(path: Path, count: int) -> Optional[list[dict]]:
    side = sidecar_path(path)
    if not side.exists():
        return None
    with open(side, newline="") as f:
        rows = list(csv.DictReader(f))
    if len(rows) != count:
        raise DatasetError(f"{side}: {len(rows)} rows for {count} edges")
    return rows


def read_g2o(path: Path) -> PoseGraph:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing graph file {path}")
    graph = PoseGraph()
    raw_edges = []
    upper = np.triu_indices(6)
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        tokens = line.split()
        if not tokens or tokens[0].startswith("#") or tokens[0] == "FIX":
            continue
        tag = tokens[0]
        if tag == "VERTEX_SE3:QUAT":
            if len(tokens) != 9:
                raise ParseError(lineno, f"vertex needs 8 fields, got {len(tokens) - 1}")
            key = node_key(_floats(tokens[1:2], lineno)[0])
            if key in graph.nodes:
                raise ParseError(lineno, f"duplicate vertex {tokens[1]}")
            x, y, z, qx, qy, qz, qw = _floats(tokens[2:], lineno)
            graph.add_node(key, Pose3(np.array([qw, qx, qy, qz]), [x, y, z]))
        elif tag == "EDGE_SE3:QUAT":
            if len(tokens) != 31:
                raise ParseError(lineno, f"edge needs 30 fields, got {len(tokens) - 1}")
            ids = _floats(tokens[1:3], lineno)
            values = _floats(tokens[3:], lineno)
            info = np.zeros((6, 6))
            info[upper] = values[7:]
            info = info + np.triu(info, 1).T
            info = info[G2O_PERMUTATION][:, G2O_PERMUTATION]
            x, y, z, qx, qy, qz, qw = values[:7]
            raw_edges.append((lineno, node_key(ids[0]), node_key(ids[1]),
                              Pose3(np.array([qw, qx, qy, qz]), [x, y, z]), info))
        else:
            raise ParseError(lineno, f"unknown record {tag!r}")

    successor = {}
    for robot in graph.robots():
        keys = graph.robot_nodes(robot)
        successor.update(zip(keys[:-1], keys[1:]))
    side = _read_sidecar(path, len(raw_edges))
    for n, (lineno, frm, to, meas, info) in enumerate(raw_edges):
        for key in (frm, to):
            if key not in graph.nodes:
                raise ParseError(lineno, f"edge references unknown vertex {node_id(key)}")
        extra = {}
        if side is not None:
            row = side[n]
            if (node_key(int(row["id1"])), node_key(int(row["id2"]))) != (frm, to):
                raise ParseError(lineno, "sidecar row does not match edge")
            extra = dict(kind=row["kind"], category=row["category"], gnc_weight=float(row["gnc_weight"]))
        else:
            extra = dict(kind=ODOMETRY if successor.get(frm) == to else INTER_ROBOT)
        try:
            edge = Edge(frm, to, meas, info, **extra)
        except (NotPositiveDefinite, InvalidSpec) as e:
            raise ParseError(lineno, str(e))
        graph.add_edge(edge)
    return graph


# ═══════════════════════════════════════
# SVG EXPORT
# ═══════════════════════════════════════

EDGE_COLORS = {"correct": "#2ca02c", "wrong_pr": "#d62728", "wrong_pcr": "#1f77b4", "unknown": "#7f7f7f"}


def write_graph_svg(graph: PoseGraph, path: Path, size: int = 800):
    """Top-down view: odometry grey, loops coloured by category."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = sorted(graph.nodes)
    xy = np.array([graph.nodes[k].translation[:2] for k in keys]) if keys else np.zeros((1, 2))
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    scale = (size - 40) / max(float(np.max(hi - lo)), 1e-9)

    def px(key: NodeKey) -> tuple[str, str]:
        x, y = graph.nodes[key].translation[:2]
        return fmt(20 + (x - lo[0]) * scale, 6), fmt(size - 20 - (y - lo[1]) * scale, 6)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for e in graph.edges:
        (x1, y1), (x2, y2) = px(e.frm), px(e.to)
        color = EDGE_COLORS["unknown"] if e.kind == ODOMETRY else EDGE_COLORS[e.category]
        dash = ' stroke-dasharray="4,3"' if e.gnc_weight < 0.5 else ""
        parts.append(f'<line x1="{x1}" y1="{y1}" x2="{x2}" y2="{y2}" stroke="{color}" stroke-width="1"{dash}/>')
    for key in keys:
        x, y = px(key)
        parts.append(f'<circle cx="{x}" cy="{y}" r="1.5" fill="black"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
