# errors.py
from typing import Optional


class TunnelSlamError(Exception):
    pass


# ─── Geometry / input ───

class DegenerateInput(TunnelSlamError):
    pass


class EmptyCloud(TunnelSlamError):
    pass


class TooFewPoints(TunnelSlamError):
    pass


class NoCorrespondences(TunnelSlamError):
    pass


class ShapeMismatch(TunnelSlamError):
    pass


class StreamLengthMismatch(TunnelSlamError):
    pass


# ─── Simulator ───

class InvalidSpec(TunnelSlamError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class SensorOutsideWorld(TunnelSlamError):
    pass


class WaypointOutsideWorld(TunnelSlamError):
    pass


# ─── Graph / robust selection ───

class MissingNode(TunnelSlamError):
    pass


class Disconnected(TunnelSlamError):
    pass


class NotPositiveDefinite(TunnelSlamError):
    pass


class ParseError(TunnelSlamError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class MissingOdometrySpan(TunnelSlamError):
    pass


class SizeLimit(TunnelSlamError):
    pass


# ─── Merge / evaluation / experiment ───

class ChannelClosed(TunnelSlamError):
    pass


class NoOverlap(TunnelSlamError):
    pass


class MissingGroundTruth(TunnelSlamError):
    pass


class IncompleteMatrix(TunnelSlamError):
    def __init__(self, missing: list[str]):
        super().__init__(f"missing cells: {', '.join(missing)}")
        self.missing = missing


class ConfigError(TunnelSlamError):
    def __init__(self, key: str, reason: str, path: Optional[str] = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{key}: {reason}")
        self.key = key
        self.reason = reason
        self.path = path


class DatasetError(TunnelSlamError):
    pass


class ProtocolError(TunnelSlamError):
    pass
