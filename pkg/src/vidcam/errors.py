"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class VidcamError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VidcamError, ValueError):
    """Tensor shapes do not agree; the message names the offending dimension."""


class ConfigError(VidcamError, ValueError):
    """Invalid architecture, training or sampling configuration."""


class DataError(VidcamError):
    """Missing, corrupt or inconsistent input data (frames, manifests, catalogs)."""


class CheckpointError(DataError):
    """Checkpoint file is truncated, corrupted or of an unsupported version."""


class DecoderError(DataError):
    """The external video decoder failed or is unavailable."""


class NumericError(VidcamError, ArithmeticError):
    """Non-finite values appeared during training or a gradient check failed."""
