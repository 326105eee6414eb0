"""Exception types shared across the profiler."""

from __future__ import annotations


class ProfInferError(Exception):
    """Base class for all profiler errors."""


class ConfigError(ProfInferError):
    pass


class StreamError(ProfInferError):
    """Malformed wire stream; carries the byte offset of the bad record."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UnbalancedProbeError(ProfInferError):
    """Enter/exit probe events do not pair up."""

    def __init__(self, message: str, seq: int):
        super().__init__(f"{message} (seq {seq})")
        self.seq = seq


class StructuralError(ProfInferError):
    """Event stream shape the runtime cannot produce (nesting, reordering)."""


class DagUnavailableError(ProfInferError):
    """Graph reconstruction needs data the capture did not record."""


class UnknownIterationError(ProfInferError):
    """The requested iteration does not exist in the session."""


class MetricUnavailableError(ProfInferError):
    """The requested node metric was not captured in this session."""


class MissingCounterError(ProfInferError):
    """A derived statistic needs a counter the session did not record."""


class DegenerateFitError(ProfInferError):
    """Regression input has no variance to fit against."""
