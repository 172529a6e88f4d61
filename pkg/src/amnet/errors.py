"""Exception types shared across the package."""


class AmnetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(AmnetError, ValueError):
    """Operands have incompatible shapes; the message names both."""


class GraphFreedError(AmnetError, RuntimeError):
    """backward() was called again on a graph that has been freed."""


class AudioFormatError(AmnetError, ValueError):
    """A WAV file is malformed, truncated, or uses an unsupported encoding."""


class SampleRateError(AmnetError, ValueError):
    """A clip's sample rate does not match what the pipeline expects."""


class CheckpointError(AmnetError, ValueError):
    """A checkpoint file failed magic/version/structure validation."""


class ManifestError(AmnetError, ValueError):
    """A dataset manifest or annotation file failed to parse or validate."""


class DivergenceError(AmnetError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(AmnetError, ValueError):
    """A configuration value or key is invalid."""
