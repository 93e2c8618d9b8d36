"""Exception hierarchy. Each class carries the process exit code used by the CLI."""

from __future__ import annotations


class FedCropError(Exception):
    exit_code = 1


class ConfigurationError(FedCropError):
    exit_code = 2


class ShapeError(FedCropError):
    exit_code = 2


class DataError(FedCropError):
    exit_code = 3


class ProtocolError(FedCropError):
    exit_code = 4


class EncodingError(ProtocolError):
    pass


class ChecksumError(ProtocolError):
    """Payload CRC32 did not match the trailer."""


class TruncationError(ProtocolError):
    """Stream ended in the middle of a frame."""


class ConnectionLost(ProtocolError):
    pass


class AggregationError(ProtocolError):
    pass


class RoundSyncError(FedCropError):
    exit_code = 5
