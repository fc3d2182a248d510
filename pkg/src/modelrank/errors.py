"""Exception taxonomy shared across the package."""


class ModelRankError(Exception):
    """Base class for all package errors."""


class ShapeError(ModelRankError):
    """Operands have incompatible shapes."""


class NumericsError(ModelRankError):
    """An operation produced a NaN or infinity."""


class ContractError(ModelRankError):
    """A caller violated an operation's precondition."""


class GroupTooSmall(ModelRankError):
    """An evaluation group has fewer than two members."""


class InvalidSpec(ModelRankError):
    """A split specification is malformed."""


class InvalidMeta(ModelRankError):
    """Entity metadata violates an invariant (e.g. non-positive parameter count)."""


class UnknownEntity(ModelRankError):
    """An entity index is out of range for its embedding table."""


class EmptyCandidates(ModelRankError):
    """A scoring request received no candidates."""


class RemoteEmbedUnavailable(ModelRankError):
    """The remote embedding endpoint failed and no cached vector exists."""


class CheckpointError(ModelRankError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint was written with an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """The checkpoint file is shorter than its manifest declares."""


class CheckpointShapeError(CheckpointError):
    """A stored array does not match the shape declared in the manifest."""
