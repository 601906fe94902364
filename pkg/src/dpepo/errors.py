"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DPEPOError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DPEPOError, ValueError):
    """A configuration value violates its documented constraint."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class UsageError(DPEPOError, RuntimeError):
    """An operation was called outside its precondition."""


class ProtocolError(DPEPOError, ValueError):
    """Structured agent output or a wire message broke the protocol."""


class ParseError(ProtocolError):
    """Agent output could not be parsed; ``offset`` is a UTF-8 byte offset."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


class ScoringError(DPEPOError, ValueError):
    """A turn cannot be scored under the given decision context."""


class NumericError(DPEPOError, ArithmeticError):
    pass


class TransportError(DPEPOError, ConnectionError):
    """The chat-completion endpoint could not be reached after retries."""


class FormatError(DPEPOError, ValueError):
    """A persisted artifact has an unknown format or version."""
