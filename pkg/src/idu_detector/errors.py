"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps the three top-level families onto exit codes: data errors
exit 2, configuration errors exit 3, numeric aborts exit 4.
"""


class IDUError(Exception):
    """Base class for all errors raised by this package."""


class DataError(IDUError):
    """Malformed or unusable input data."""


class ConfigError(IDUError, ValueError):
    """Invalid parameter or configuration combination."""


class NumericError(IDUError, ArithmeticError):
    """Non-finite value produced by a forward pass or the training loss."""


class ShapeError(IDUError, ValueError):
    """Tensor dimensions do not agree."""


class UsageError(IDUError):
    """API called in the wrong state (e.g. transform before fit)."""


class UnknownTag(DataError, KeyError):
    """A label tag has no entry in the active mapping table."""

    def __init__(self, tag):
        super().__init__(tag)
        self.tag = tag

    def __str__(self):
        return f"unknown tag {self.tag!r}"


class RejectThresholdExceeded(DataError):
    """More than the tolerated fraction of rows failed schema validation."""

    def __init__(self, message, rejects):
        super().__init__(message)
        self.rejects = rejects


class DigestMismatch(DataError):
    """A stored digest does not match the recomputed one."""


class CheckpointError(DataError):
    """Base class for checkpoint decoding failures."""


class MagicMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class CheckpointDigestMismatch(CheckpointError, DigestMismatch):
    pass


class CheckpointShapeMismatch(CheckpointError, ShapeError):
    pass


def exit_code_for(exc):
    """Process exit code for an exception: 2 data, 3 config or usage, 4 numeric."""
    if isinstance(exc, NumericError):
        return 4
    if isinstance(exc, (ConfigError, UsageError)):
        return 3
    if isinstance(exc, (DataError, ShapeError, OSError)):
        return 2
    return 1
