"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class DeclineForgeError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigError(DeclineForgeError):
    exit_code = 2


class DependencyError(DeclineForgeError):
    """An upstream pipeline stage has not completed."""

    exit_code = 3

    def __init__(self, stage: str, needed_by: Optional[str] = None):
        self.stage = stage
        self.needed_by = needed_by
        msg = f"upstream stage '{stage}' has not completed"
        if needed_by:
            msg += f" (required by '{needed_by}')"
        super().__init__(msg)


class TrainingDivergedError(DeclineForgeError):
    exit_code = 4

    def __init__(self, epoch: int, loss: float, model: str = "model"):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"{model} training diverged at epoch {epoch} (loss={loss})")


class WorkspaceError(DeclineForgeError):
    """Refusal to overwrite existing outputs."""


class ManifestCorruptError(WorkspaceError):
    pass


class VolumeFormatError(DeclineForgeError):
    """A volume file could not be parsed; `field` names the offending header field."""

    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"{field}: {detail}")


class HeaderSizeError(VolumeFormatError):
    pass


class MagicError(VolumeFormatError):
    pass


class DatatypeError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class NonFinitePayloadError(VolumeFormatError):
    pass


class ShapeError(DeclineForgeError):
    def __init__(self, op: str, left, right):
        self.shapes = (tuple(left), tuple(right))
        super().__init__(f"{op}: incompatible shapes {tuple(left)} and {tuple(right)}")


class ArgumentError(DeclineForgeError, ValueError):
    pass


class InfeasibleBandError(ArgumentError):
    pass


class DataError(DeclineForgeError):
    pass


class InvariantError(DeclineForgeError):
    pass
