from .bandwidth import BandwidthMiddleware, payload_bytes
from .sequence import SequenceMiddleware

__all__ = ["BandwidthMiddleware", "SequenceMiddleware", "payload_bytes"]
