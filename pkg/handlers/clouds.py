import logging

from errors import ProtocolError
from merge import CLOUD_REQUEST, CLOUD_RESPONSE, MergeMessage, Router

from .loops import announce_loops

logger = logging.getLogger(__name__)

router = Router("clouds")


@router.message(CLOUD_REQUEST)
async def on_cloud_request(message: MergeMessage, data: dict):
    agent = data["agent"]
    key = tuple(message.payload["key"])
    kf = agent.by_key.get(key)
    if kf is None:
        raise ProtocolError(f"robot {agent.robot} has no keyframe {key}")
    await agent.send(CLOUD_RESPONSE, {"key": kf.key, "origin": message.payload["origin"], "cloud": kf.cloud})


@router.message(CLOUD_RESPONSE)
async def on_cloud_response(message: MergeMessage, data: dict):
    agent = data["agent"]
    pair = (tuple(message.payload["origin"]), tuple(message.payload["key"]))
    cand = agent.pending_verifications.pop(pair, None)
    if cand is None:
        raise ProtocolError(f"robot {agent.robot} did not request {pair}")

    edge = agent.verify(cand, message.payload["cloud"])
    if edge is not None:
        agent.verified.append(edge)

    if not agent.pending_verifications:
        logger.info(
            f"Robot {agent.robot}: verified {len(agent.verified)}/{len(agent.candidates)} candidates"
        )
        await announce_loops(agent)
