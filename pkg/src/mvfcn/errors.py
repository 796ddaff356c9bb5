"""Exception hierarchy shared across the engine.

The CLI maps these onto stable exit codes: ConfigError and ShapeError are
usage problems (2), DataError covers datasets and image files (3), and
CheckpointError covers everything about serialized model state (4).
"""


class EngineError(Exception):
    """Base class for every failure raised by this package."""


class ConfigError(EngineError):
    """Invalid configuration key, value, or command-line argument."""


class DataError(EngineError):
    """Unreadable, malformed, or misaligned image/dataset input."""


class CheckpointError(EngineError):
    """Corrupt, incompatible, or mismatched checkpoint file."""


class ShapeError(EngineError):
    """Tensor shape or layer-spec contract violation."""
