"""Exception hierarchy shared by every esdnet module."""


class EsdError(Exception):
    """Base class for user-facing failures (CLI exit code 1)."""


class DimensionError(EsdError, ValueError):
    """Tensor shapes do not agree."""


class ConfigError(EsdError, ValueError):
    """Invalid configuration value or unknown key."""


class TopologyError(EsdError, ValueError):
    """Branch topology cannot be built from the given blocks and split points."""


class UsageError(EsdError, RuntimeError):
    """API called in a state that does not allow it."""


class DataError(EsdError, ValueError):
    """Malformed or corrupt dataset content."""


class DivergenceError(EsdError, FloatingPointError):
    """Training produced a non-finite loss."""


class CheckpointError(EsdError, ValueError):
    """Checkpoint file is malformed or incompatible."""
