from typing import Any

from errors import ProtocolError
from merge import Handler, MergeMessage, MessageMiddleware


class SequenceMiddleware(MessageMiddleware):
    """Rejects messages whose sequence number does not strictly increase per (sender, kind)."""

    def __init__(self):
        self.last: dict[tuple[int, str], int] = {}

    async def __call__(self, handler: Handler, message: MergeMessage, data: dict) -> Any:
        key = (message.sender, message.kind)
        if message.sequence <= self.last.get(key, 0):
            raise ProtocolError(
                f"{message.kind} from robot {message.sender}: sequence {message.sequence} "
                f"after {self.last[key]}"
            )
        self.last[key] = message.sequence
        return await handler(message, data)
