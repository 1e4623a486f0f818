"""Exception hierarchy. Every error carries the process exit code the command line reports for it."""
from __future__ import annotations

from typing import Iterable, List


class TubeRepairError(Exception):
    exit_code: int = 1


class UsageError(TubeRepairError):
    """Invalid arguments or configuration."""
    exit_code = 1


class StorageError(TubeRepairError):
    """Reading or writing an artifact failed."""
    exit_code = 2


class VolumeFormatError(StorageError):
    pass


class MalformedHeaderError(VolumeFormatError):
    pass


class PayloadSizeError(VolumeFormatError):
    pass


class UnsupportedVersionError(VolumeFormatError):
    pass


class GraphSchemaError(StorageError):
    """A graph JSON document violates the schema. ``key`` names the offending key."""

    def __init__(self, key: str, detail: str = "missing or invalid"):
        super().__init__(f"graph schema violation at '{key}': {detail}")
        self.key = key


class CheckpointError(StorageError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class TensorCountMismatchError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    """Tensors of a checkpoint do not fit the target network. ``names`` lists the offending tensors."""

    def __init__(self, names: Iterable[str]):
        self.names: List[str] = sorted(names)
        super().__init__(f"incompatible tensors: {', '.join(self.names)}")


class ValidationError(TubeRepairError):
    """Input or intermediate data violates a domain rule."""
    exit_code = 3


class EmptyVolumeError(ValidationError):
    pass


class NoComponentsError(ValidationError):
    pass


class OutOfBoundsError(ValidationError):
    pass


class PhantomError(ValidationError):
    pass


class NoEligibleBranchError(ValidationError):
    pass


class InfeasibleSeparationError(ValidationError):
    pass


class CarveError(ValidationError):
    pass


class NumericError(TubeRepairError):
    exit_code = 4


class ShapeMismatchError(NumericError):
    pass


class BackwardBeforeForwardError(NumericError):
    pass
