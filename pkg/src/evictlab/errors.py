"""Exception hierarchy shared across the package."""


class ConfigError(Exception):
    """Invalid configuration: bad dimensions, budget below a policy minimum, malformed config files."""


class EngineError(Exception):
    """Internal consistency violation detected during generation."""


class EmptyContextError(EngineError):
    """Attention was requested over an empty key/value context."""


class TraceError(Exception):
    """Base class for trace file problems."""


class TraceFormatError(TraceError):
    """Corrupt, truncated, or version-incompatible trace file."""


class ReplayCompatibilityError(TraceError):
    """Trace does not carry the rows a replayed policy would need."""
