from merge import LOOP_ANNOUNCE, MergeMessage, Router

router = Router("loops")


async def announce_loops(agent):
    await agent.send(LOOP_ANNOUNCE, {"loops": list(agent.verified), "done": True})
    agent.announced = True


@router.message(LOOP_ANNOUNCE)
async def on_loop_announce(message: MergeMessage, data: dict):
    agent = data["agent"]
    agent.peer_loops.extend(message.payload["loops"])
    if message.payload["done"]:
        agent.peer_done = True
