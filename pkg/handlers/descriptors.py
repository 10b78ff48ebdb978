import logging

from graphcore import PoseGraph
from merge import CLOUD_REQUEST, DESCRIPTOR_BATCH, MergeMessage, Router

from .loops import announce_loops

logger = logging.getLogger(__name__)

router = Router("descriptors")


@router.message(DESCRIPTOR_BATCH)
async def on_descriptor_batch(message: MergeMessage, data: dict):
    agent = data["agent"]
    payload = message.payload
    agent.peer_descriptors = list(payload["keyframes"])
    agent.peer_graph = PoseGraph(nodes=dict(payload["nodes"]), edges=list(payload["odometry"]))

    candidates = agent.match()
    for cand in candidates:
        agent.pending_verifications[(cand.kf_a, cand.kf_b)] = cand
        await agent.send(CLOUD_REQUEST, {"key": cand.kf_b, "origin": cand.kf_a})
    logger.debug(f"Robot {agent.robot}: {len(candidates)} cloud requests to robot {message.sender}")

    if not candidates:
        await announce_loops(agent)
