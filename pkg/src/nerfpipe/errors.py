"""Exception hierarchy shared by every nerfpipe module."""


class NerfPipeError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(NerfPipeError, ValueError):
    """Input failed validation (bad path, empty name, malformed config)."""


class DomainError(ValidationError):
    """A numeric argument lies outside the function's domain."""


class ConfigError(NerfPipeError):
    """Configuration is inconsistent (unknown node class, bad model shape)."""


class NotFoundError(NerfPipeError, KeyError):
    """Referenced entity does not exist."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ""


class ConflictError(NerfPipeError):
    """Entity exists already, or a compare-and-set saw a stale state."""


class TransitionError(NerfPipeError):
    """Requested edge is not part of the legal lifecycle graph."""


class IllegalTransitionError(TransitionError):
    """A node operation was attempted from a state that forbids it."""


class UnsupportedClassError(NerfPipeError):
    """Operation is not defined for the node's class."""


class NoCapacityError(NerfPipeError):
    """No candidate node is usable and allocation is disabled."""


class NoDataError(NerfPipeError):
    """A reduction was requested over an empty sample set."""


class MountError(NerfPipeError):
    """Workload launched without exactly one input and one output mount."""


class PreconditionError(NerfPipeError):
    """Operation called before its preconditions were met."""


class ResultNotReadyError(NerfPipeError):
    """Result requested for a job that has not completed."""


class AuthError(NerfPipeError):
    """Upload token missing, expired, or scoped to another container."""


class ParseError(ValidationError):
    """Malformed point-cloud file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
