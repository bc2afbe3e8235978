"""Exception hierarchy shared by every module.

The CLI maps :class:`UsageError` (and subclasses) to exit code 2 and every
other :class:`LipvsrError` to exit code 1.
"""


class LipvsrError(Exception):
    pass


class UsageError(LipvsrError):
    """Caller passed arguments that can never be valid."""


class ShapeError(UsageError, ValueError):
    pass


class ConfigError(UsageError, ValueError):
    pass


class DomainError(LipvsrError, ValueError):
    """Input is well-formed but outside the operation's domain."""


class FormatError(LipvsrError, ValueError):
    """A file on disk is malformed, truncated, or inconsistent."""


class TrainingDiverged(LipvsrError, FloatingPointError):
    def __init__(self, message, hidden_trace=None):
        super().__init__(message)
        self.hidden_trace = hidden_trace or []
