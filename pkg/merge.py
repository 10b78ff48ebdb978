# merge.py
from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Awaitable, Callable, Optional

import numpy as np

from errors import ChannelClosed, ConfigError, ProtocolError, TooFewPoints
from frontend import KeyFrame
from geom import Pose3, PointCloud
from graphcore import INTER_ROBOT, ODOMETRY_INFORMATION, Edge, NodeKey, OptimizeConfig, PoseGraph, optimize
from placerec import LoopCandidate, PlaceRecConfig, describe_keyframes, match_keyframes
from registration import RegistrationConfig, global_register
from robustsel import OdometryChain, PcmConfig, pcm_filter

logger = logging.getLogger(__name__)

DESCRIPTOR_BATCH = "descriptor_batch"
CLOUD_REQUEST = "cloud_request"
CLOUD_RESPONSE = "cloud_response"
LOOP_ANNOUNCE = "loop_announce"
MESSAGE_KINDS = (DESCRIPTOR_BATCH, CLOUD_REQUEST, CLOUD_RESPONSE, LOOP_ANNOUNCE)
SNAPSHOT_STAGES = ("initial", "pcm", "optimized")

Handler = Callable[["MergeMessage", dict], Awaitable[Any]]
Labeler = Callable[[Edge], str]


@dataclass
class MergeConfig:
    use_filter: bool = True
    use_pcm: bool = True
    sc_threshold: float = 0.7
    robust: str = "gnc_tls"
    keyframe_distance: float = 0.5
    # both agents assemble and optimize; the report records their disagreement
    verify_symmetry: bool = False
    placerec: PlaceRecConfig = field(default_factory=PlaceRecConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    pcm: PcmConfig = field(default_factory=PcmConfig)
    optimize: OptimizeConfig = field(default_factory=OptimizeConfig)

    def __post_init__(self):
        if not 0.0 <= self.sc_threshold <= 1.0 + 1e-12:
            raise ConfigError("merge.sc_threshold", "must lie in [0, 1]")
        if self.robust not in ("none", "gnc_tls"):
            raise ConfigError("merge.robust", f"unknown mode {self.robust!r}")

    def optimize_config(self) -> OptimizeConfig:
        return replace(self.optimize, robust=self.robust)


@dataclass(frozen=True, eq=False)
class MergeMessage:
    kind: str
    sender: int
    recipient: int
    sequence: int
    payload: dict


# ═══════════════════════════════════════
# ROUTING
# ═══════════════════════════════════════

class Router:
    """Maps message kinds to coroutine handlers; child routers are searched in insertion order."""

    def __init__(self, name: str = ""):
        self.name = name
        self.handlers: dict[str, Handler] = {}
        self.children: list[Router] = []

    def message(self, kind: str):
        if kind not in MESSAGE_KINDS:
            raise ProtocolError(f"unknown message kind {kind!r}")

        def register(func: Handler) -> Handler:
            self.handlers[kind] = func
            return func
        return register

    def include_router(self, router: "Router"):
        self.children.append(router)

    def resolve(self, kind: str) -> Optional[Handler]:
        if kind in self.handlers:
            return self.handlers[kind]
        for child in self.children:
            found = child.resolve(kind)
            if found is not None:
                return found
        return None


class MessageMiddleware:
    """Wraps one handler call; subclasses look at the message before passing it on."""

    async def __call__(self, handler: Handler, message: MergeMessage, data: dict) -> Any:
        return await handler(message, data)


class Dispatcher:
    """Runs the handler for a message kind inside the middleware chain, first middleware outermost."""

    def __init__(self, router: Router, middlewares: Optional[list[MessageMiddleware]] = None):
        self.router = router
        self.middlewares = list(middlewares or [])

    async def feed(self, message: MergeMessage, data: dict) -> Any:
        handler = self.router.resolve(message.kind)
        if handler is None:
            raise ProtocolError(f"no handler for {message.kind}")
        for middleware in reversed(self.middlewares):
            handler = partial(middleware, handler)
        return await handler(message, data)


# ═══════════════════════════════════════
# CHANNEL
# ═══════════════════════════════════════

class Channel:
    """In-process point-to-point queues: exactly-once, per-sender FIFO delivery.

    When every active agent waits on an empty queue the channel closes and the
    waiters get ChannelClosed instead of hanging.
    """

    def __init__(self, robots: list[int]):
        self.queues: dict[int, asyncio.Queue] = {r: asyncio.Queue() for r in robots}
        self.transcript: list[MergeMessage] = []
        self.closed = False
        self.active = set(robots)
        self.waiting: set[int] = set()

    async def send(self, message: MergeMessage):
        if self.closed:
            raise ChannelClosed(f"channel closed, cannot send {message.kind} from {message.sender}")
        if message.recipient not in self.queues:
            raise ChannelClosed(f"no endpoint for robot {message.recipient}")
        self.transcript.append(message)
        self.queues[message.recipient].put_nowait(message)

    async def receive(self, robot: int) -> MergeMessage:
        queue = self.queues[robot]
        if queue.empty():
            if self.closed:
                raise ChannelClosed(f"channel closed while robot {robot} waits")
            self.waiting.add(robot)
            self._check_stalled()
        message = await queue.get()
        self.waiting.discard(robot)
        if message is None:
            raise ChannelClosed(f"channel closed while robot {robot} waits")
        return message

    def leave(self, robot: int):
        self.active.discard(robot)
        self._check_stalled()

    def _check_stalled(self):
        if self.active and self.active <= self.waiting and all(q.empty() for q in self.queues.values()):
            logger.warning(f"Channel stalled with robots {sorted(self.waiting)} waiting; closing")
            self.close()

    def close(self):
        if self.closed:
            return
        self.closed = True
        for robot in self.waiting:
            self.queues[robot].put_nowait(None)


class ReplayChannel(Channel):
    """Feeds one robot the peer messages of a recorded transcript; its own sends are recorded only."""

    def __init__(self, robot: int, transcript: list[MergeMessage]):
        super().__init__([robot])
        self.robot = robot
        for message in transcript:
            if message.recipient == robot:
                self.queues[robot].put_nowait(message)

    async def send(self, message: MergeMessage):
        self.transcript.append(message)


# ═══════════════════════════════════════
# AGENTS
# ═══════════════════════════════════════

def _span_lengths(keyframes: list[KeyFrame]) -> dict[NodeKey, float]:
    """Cumulative odometry path length at every keyframe."""
    out, total, last = {}, 0.0, None
    for kf in sorted(keyframes, key=lambda k: k.index):
        if last is not None:
            total += float(np.linalg.norm(kf.pose.translation - last))
        out[kf.key] = total
        last = kf.pose.translation
    return out


def build_local_graph(keyframes: list[KeyFrame], use_filter: bool, keyframe_distance: float = 0.5) -> PoseGraph:
    """Odometry chain over the retained keyframes; spans across dropped keyframes get weaker information."""
    graph = PoseGraph()
    retained = [kf for kf in sorted(keyframes, key=lambda k: k.index) if kf.informative or not use_filter]
    arc = _span_lengths(keyframes)
    for kf in retained:
        graph.add_node(kf.key, kf.pose)
    for prev, cur in zip(retained[:-1], retained[1:]):
        span = arc[cur.key] - arc[prev.key]
        scale = max(1.0, span / keyframe_distance) if cur.index - prev.index > 1 else 1.0
        graph.add_edge(Edge(prev.key, cur.key, prev.pose.between(cur.pose), ODOMETRY_INFORMATION / scale))
    return graph


@dataclass(eq=False)
class AgentState:
    robot: int
    peer: int
    keyframes: list[KeyFrame]
    local_graph: PoseGraph
    cfg: MergeConfig
    channel: Channel
    labeler: Optional[Labeler] = None
    peer_descriptors: list[KeyFrame] = field(default_factory=list)
    peer_graph: Optional[PoseGraph] = None
    pending_verifications: dict[tuple[NodeKey, NodeKey], LoopCandidate] = field(default_factory=dict)
    candidates: list[LoopCandidate] = field(default_factory=list)
    verified: list[Edge] = field(default_factory=list)
    peer_loops: list[Edge] = field(default_factory=list)
    announced: bool = False
    peer_done: bool = False
    sequence: dict[str, int] = field(default_factory=dict)

    @property
    def by_key(self) -> dict[NodeKey, KeyFrame]:
        return {kf.key: kf for kf in self.keyframes}

    @property
    def finished(self) -> bool:
        return self.announced and self.peer_done

    def retained(self) -> list[KeyFrame]:
        return [kf for kf in self.keyframes if kf.informative or not self.cfg.use_filter]

    async def send(self, kind: str, payload: dict):
        seq = self.sequence.get(kind, 0) + 1
        self.sequence[kind] = seq
        await self.channel.send(MergeMessage(kind=kind, sender=self.robot, recipient=self.peer, sequence=seq,
                                             payload=payload))

    def descriptor_payload(self) -> dict:
        stubs = [replace(kf, cloud=PointCloud(np.zeros((0, 3)))) for kf in self.keyframes]
        return {
            "keyframes": stubs,
            "nodes": dict(self.local_graph.nodes),
            "odometry": list(self.local_graph.edges),
        }

    def match(self) -> list[LoopCandidate]:
        self.candidates = match_keyframes(
            self.keyframes, self.peer_descriptors, self.cfg.sc_threshold, self.cfg.use_filter, self.cfg.placerec
        )
        return self.candidates

    def verify(self, candidate: LoopCandidate, peer_cloud: PointCloud) -> Optional[Edge]:
        """Registers the pair and returns the loop edge oriented from the lower robot."""
        own = self.by_key[candidate.kf_a]
        if self.robot < self.peer:
            frm, to, target, source = own.key, candidate.kf_b, own.cloud, peer_cloud
        else:
            frm, to, target, source = candidate.kf_b, own.key, peer_cloud, own.cloud
        try:
            result = global_register(source, target, self.cfg.registration)
        except TooFewPoints as e:
            logger.debug(f"Robot {self.robot}: skip {frm}-{to}: {e}")
            return None
        if not result.converged:
            return None
        edge = Edge(
            frm, to, result.pose, ODOMETRY_INFORMATION * result.fitness,
            kind=INTER_ROBOT, similarity=candidate.similarity, fitness=result.fitness,
        )
        if self.labeler is not None:
            edge = replace(edge, category=self.labeler(edge))
        return edge


def _dedupe_loops(loops_low: list[Edge], loops_high: list[Edge]) -> list[Edge]:
    """Union of both agents' loops, one edge per node pair, identical on both sides."""
    seen = {}
    for edge in list(loops_low) + list(loops_high):
        seen.setdefault((edge.frm, edge.to), edge)
    return [seen[k] for k in sorted(seen)]


async def run_agent(agent: AgentState, dispatcher: Dispatcher):
    data = {"agent": agent}
    try:
        await agent.send(DESCRIPTOR_BATCH, agent.descriptor_payload())
        while not agent.finished:
            message = await agent.channel.receive(agent.robot)
            await dispatcher.feed(message, data)
    finally:
        agent.channel.leave(agent.robot)


def make_dispatcher(counters: Optional[dict] = None) -> Dispatcher:
    from handlers import setup_routers
    from middlewares import BandwidthMiddleware, SequenceMiddleware

    return Dispatcher(setup_routers(), [SequenceMiddleware(), BandwidthMiddleware(counters)])


async def exchange(channel: Channel, agents: list[AgentState],
                   counters: Optional[dict] = None) -> list[MergeMessage]:
    """Runs every agent to completion over the channel and returns the transcript in send order."""
    dispatchers = [make_dispatcher(counters) for _ in agents]
    await asyncio.gather(*(run_agent(a, d) for a, d in zip(agents, dispatchers)))
    return channel.transcript


# ═══════════════════════════════════════
# ASSEMBLY
# ═══════════════════════════════════════

@dataclass
class MergeReport:
    robots: tuple[int, int]
    use_filter: bool
    use_pcm: bool
    robust: str
    keyframes: dict[int, int] = field(default_factory=dict)
    retained: dict[int, int] = field(default_factory=dict)
    candidates: dict[int, int] = field(default_factory=dict)
    verified: int = 0
    post_pcm: int = 0
    categories: dict[str, dict[str, int]] = field(default_factory=dict)
    no_loops: bool = False
    final_chi2: float = 0.0
    gnc_converged: bool = True
    relative_frame: list[float] = field(default_factory=list)
    messages: dict[str, int] = field(default_factory=dict)
    bytes: dict[str, int] = field(default_factory=dict)
    transcript_length: int = 0
    expected_transcript_length: int = 0
    agent_disagreement: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "robots": list(self.robots),
            "use_filter": self.use_filter,
            "use_pcm": self.use_pcm,
            "robust": self.robust,
            "keyframes": {str(k): v for k, v in self.keyframes.items()},
            "retained": {str(k): v for k, v in self.retained.items()},
            "candidates": {str(k): v for k, v in self.candidates.items()},
            "verified": self.verified,
            "post_pcm": self.post_pcm,
            "categories": self.categories,
            "no_loops": self.no_loops,
            "final_chi2": self.final_chi2,
            "gnc_converged": self.gnc_converged,
            "relative_frame": self.relative_frame,
            "messages": self.messages,
            "bytes": self.bytes,
            "transcript_length": self.transcript_length,
            "expected_transcript_length": self.expected_transcript_length,
            "agent_disagreement": self.agent_disagreement,
        }


@dataclass(eq=False)
class Assembly:
    graph: PoseGraph
    snapshots: dict[str, PoseGraph]
    loops: list[Edge]
    kept: list[Edge]
    relative_frame: Optional[Pose3]
    final_chi2: float = 0.0
    gnc_converged: bool = True


def count_categories(edges: list[Edge]) -> dict[str, int]:
    counts = {"correct": 0, "wrong_pr": 0, "wrong_pcr": 0, "unknown": 0}
    for e in edges:
        counts[e.category] += 1
    return counts


def assemble(agent: AgentState) -> Assembly:
    """Joint graph as this agent sees it: both chains, union loops, optional PCM, optimization."""
    low, high = sorted((agent.robot, agent.peer))
    own_graph, peer_graph = agent.local_graph, agent.peer_graph
    graphs = {agent.robot: own_graph, agent.peer: peer_graph}
    own_loops, peer_loops = agent.verified, agent.peer_loops
    loops = _dedupe_loops(*((own_loops, peer_loops) if agent.robot == low else (peer_loops, own_loops)))

    union = PoseGraph()
    for robot in (low, high):
        for key, pose in graphs[robot].nodes.items():
            union.add_node(key, pose)
    for robot in (low, high):
        for e in graphs[robot].edges:
            union.add_edge(e)
    if not loops:
        # nothing to filter or optimize; every stage is the unmerged union
        return Assembly(graph=union, snapshots=dict.fromkeys(SNAPSHOT_STAGES, union), loops=[], kept=[],
                        relative_frame=None)

    # high robot's frame placed through the best-fitness loop
    seed = max(loops, key=lambda e: (e.fitness, -loops.index(e)))
    frame = union.nodes[seed.frm].compose(seed.measurement).compose(union.nodes[seed.to].inverse())
    for key in graphs[high].nodes:
        union.nodes[key] = frame.compose(union.nodes[key])
    initial = union.copy()
    for e in loops:
        initial.add_edge(e)

    kept = loops
    if agent.cfg.use_pcm:
        kept = pcm_filter(
            loops, OdometryChain.from_graph(graphs[low], low), OdometryChain.from_graph(graphs[high], high),
            agent.cfg.pcm.gamma, agent.cfg.pcm.max_vertices,
        )
    filtered = union.copy()
    for e in kept:
        filtered.add_edge(e)

    result = optimize(filtered, agent.cfg.optimize_config())
    optimized = filtered.with_solution(result)
    anchor_low = min(graphs[low].nodes)
    anchor_high = min(graphs[high].nodes)
    relative = optimized.nodes[anchor_low].between(optimized.nodes[anchor_high])
    return Assembly(
        graph=optimized,
        snapshots={"initial": initial, "pcm": filtered, "optimized": optimized},
        loops=loops,
        kept=kept,
        relative_frame=relative,
        final_chi2=result.final_chi2,
        gnc_converged=result.converged,
    )


@dataclass(eq=False)
class MergeResult:
    graph: PoseGraph
    report: MergeReport
    snapshots: dict[str, PoseGraph]
    transcript: list[MergeMessage]
    assembly: Assembly


def _new_agent(robot: int, peer: int, kfs: list[KeyFrame], cfg: MergeConfig, channel: Channel,
               labeler: Optional[Labeler]) -> AgentState:
    described = describe_keyframes(kfs, cfg.placerec) if any(kf.descriptor is None for kf in kfs) else list(kfs)
    return AgentState(
        robot=robot,
        peer=peer,
        keyframes=described,
        local_graph=build_local_graph(described, cfg.use_filter, cfg.keyframe_distance),
        cfg=cfg,
        channel=channel,
        labeler=labeler,
    )


def _build_report(cfg: MergeConfig, agents: list[AgentState], assembly: Assembly, transcript: list[MergeMessage],
                  counters: dict) -> MergeReport:
    robots = tuple(sorted(a.robot for a in agents))
    report = MergeReport(robots=robots, use_filter=cfg.use_filter, use_pcm=cfg.use_pcm, robust=cfg.robust)
    for a in agents:
        report.keyframes[a.robot] = len(a.keyframes)
        report.retained[a.robot] = len(a.retained())
        report.candidates[a.robot] = len(a.candidates)
    report.verified = len(assembly.loops)
    report.post_pcm = len(assembly.kept)
    report.categories = {
        "verified": count_categories(assembly.loops),
        "pcm": count_categories(assembly.kept),
        "inliers": count_categories([e for e in assembly.graph.inter_edges() if e.gnc_weight >= 0.5]),
    }
    report.no_loops = not assembly.loops
    report.final_chi2 = assembly.final_chi2
    report.gnc_converged = assembly.gnc_converged
    if assembly.relative_frame is not None:
        report.relative_frame = assembly.relative_frame.to_xyz_quat()
    report.messages = {kind: sum(m.kind == kind for m in transcript) for kind in MESSAGE_KINDS}
    report.bytes = {kind: int(counters.get(kind, 0)) for kind in MESSAGE_KINDS}
    report.transcript_length = len(transcript)
    report.expected_transcript_length = 2 + 2 * sum(report.candidates.values()) + 2
    return report


async def merge_session(kfs_a: list[KeyFrame], kfs_b: list[KeyFrame], cfg: Optional[MergeConfig] = None,
                        labeler: Optional[Labeler] = None) -> MergeResult:
    cfg = cfg or MergeConfig()
    if not kfs_a or not kfs_b:
        raise ConfigError("merge", "both keyframe lists must be non-empty")
    robot_a, robot_b = kfs_a[0].robot, kfs_b[0].robot
    if robot_a == robot_b:
        raise ConfigError("merge", f"both keyframe lists belong to robot {robot_a}")

    channel = Channel([robot_a, robot_b])
    agents = [
        _new_agent(robot_a, robot_b, kfs_a, cfg, channel, labeler),
        _new_agent(robot_b, robot_a, kfs_b, cfg, channel, labeler),
    ]
    counters: dict[str, int] = {}
    transcript = await exchange(channel, agents, counters)

    agents.sort(key=lambda a: a.robot)
    assembly = assemble(agents[0])
    report = _build_report(cfg, agents, assembly, transcript, counters)
    if cfg.verify_symmetry and assembly.relative_frame is not None:
        mirror = assemble(agents[1])
        diff = assembly.relative_frame.between(mirror.relative_frame)
        report.agent_disagreement = float(np.linalg.norm(diff.translation)) + diff.rotation_angle()

    if report.no_loops:
        logger.warning(f"Robots {report.robots}: no verified loops, graphs left unmerged")
    else:
        logger.info(
            f"Robots {report.robots}: {sum(report.candidates.values())} candidates, {report.verified} verified, "
            f"{report.post_pcm} after PCM, chi2={report.final_chi2:.4g}"
        )
    return MergeResult(graph=assembly.graph, report=report, snapshots=assembly.snapshots,
                       transcript=transcript, assembly=assembly)


def run_merge_session(kfs_a: list[KeyFrame], kfs_b: list[KeyFrame], cfg: Optional[MergeConfig] = None,
                      labeler: Optional[Labeler] = None) -> MergeResult:
    return asyncio.run(merge_session(kfs_a, kfs_b, cfg, labeler))


async def replay_agent(robot: int, kfs: list[KeyFrame], transcript: list[MergeMessage],
                       cfg: Optional[MergeConfig] = None,
                       labeler: Optional[Labeler] = None) -> Assembly:
    """Re-runs one agent against the peer messages of a recorded transcript."""
    cfg = cfg or MergeConfig()
    peers = {m.sender for m in transcript if m.recipient == robot}
    if len(peers) != 1:
        raise ProtocolError(f"transcript has {len(peers)} peers for robot {robot}")
    channel = ReplayChannel(robot, transcript)
    agent = _new_agent(robot, peers.pop(), kfs, cfg, channel, labeler)
    await run_agent(agent, make_dispatcher())
    return assemble(agent)
