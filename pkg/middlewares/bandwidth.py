import dataclasses
from typing import Any, Optional

import numpy as np

from geom import Pose3
from merge import Handler, MergeMessage, MessageMiddleware


def payload_bytes(value: Any) -> int:
    """Approximate wire size of a message payload."""
    if value is None:
        return 0
    if isinstance(value, np.ndarray):
        return int(value.nbytes)
    if isinstance(value, Pose3):
        return 7 * 8
    if isinstance(value, (bool, int, float, np.number)):
        return 8
    if isinstance(value, str):
        return len(value.encode())
    if isinstance(value, dict):
        return sum(payload_bytes(k) + payload_bytes(v) for k, v in value.items())
    if isinstance(value, (list, tuple)):
        return sum(payload_bytes(v) for v in value)
    if dataclasses.is_dataclass(value):
        return sum(payload_bytes(getattr(value, f.name)) for f in dataclasses.fields(value))
    return 0


class BandwidthMiddleware(MessageMiddleware):
    """Accumulates received payload bytes per message kind."""

    def __init__(self, counters: Optional[dict] = None):
        self.counters = counters if counters is not None else {}

    async def __call__(self, handler: Handler, message: MergeMessage, data: dict) -> Any:
        self.counters[message.kind] = self.counters.get(message.kind, 0) + payload_bytes(message.payload)
        return await handler(message, data)
