"""Exception types shared across the engine."""

from __future__ import annotations


class EnsembleError(Exception):
    """Base class for all engine errors."""


class SpecSyntaxError(EnsembleError):
    """Malformed workflow document; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(EnsembleError):
    """Structurally valid document that violates a workflow invariant."""


class UnboundTokenError(EnsembleError):
    """A `$(NAME)` token had no binding at substitution time."""

    def __init__(self, token: str, context: str = ""):
        self.token = token
        self.context = context
        where = f" in {context}" if context else ""
        super().__init__(f"unbound token $({token}){where}")


class ExpansionError(EnsembleError):
    """Step graph expansion failed (e.g. fan-in on an unknown step)."""


class ConfigError(EnsembleError):
    """Invalid runtime configuration value."""


class SampleFileError(EnsembleError):
    """Missing or malformed sample CSV file."""


class CorruptEnvelopeError(EnsembleError):
    """A task envelope failed to deserialize or is self-inconsistent."""


class MessageTooLargeError(EnsembleError):
    """Serialized envelope exceeds the configured message size limit."""


class BrokerUnreachableError(EnsembleError):
    """Could not connect to (or stay connected to) the broker."""


class BrokerError(EnsembleError):
    """Broker rejected a request (bad arguments, unknown op, ...)."""


class UnknownTagError(BrokerError):
    """Acknowledged a delivery tag the broker does not consider in flight."""


class StorageError(EnsembleError):
    """Broker persistence failure (log or snapshot I/O)."""


class ProtocolError(EnsembleError):
    """Malformed frame or response on the wire."""


class WorkspaceError(EnsembleError):
    """Could not create or use a task workspace directory."""


class SpawnError(EnsembleError):
    """Could not start the task's child process (e.g. missing shell)."""


class UnknownStudyError(EnsembleError):
    """Operation referenced a study the system knows nothing about."""


_ERROR_BY_NAME = {
    "ValidationError": ValidationError,
    "ConfigError": ConfigError,
    "CorruptEnvelopeError": CorruptEnvelopeError,
    "MessageTooLargeError": MessageTooLargeError,
    "UnknownTagError": UnknownTagError,
    "StorageError": StorageError,
    "BrokerError": BrokerError,
    "UnknownStudyError": UnknownStudyError,
}


def error_from_wire(err: str) -> EnsembleError:
    """Map a wire-level error string (``Name: detail``) back to an exception."""
    name, _, detail = err.partition(":")
    cls = _ERROR_BY_NAME.get(name.strip(), BrokerError)
    return cls(detail.strip() or err)


def error_to_wire(exc: Exception) -> str:
    """Render an exception as a wire-level error string."""
    return f"{type(exc).__name__}: {exc}"
