"""Exception types shared across the package."""


class NegMergeError(Exception):
    """Base class for all package-specific errors."""


class ContainerFormatError(NegMergeError):
    """The checkpoint container violates the binary format rules."""


class OffsetOutOfBounds(ContainerFormatError):
    """A tensor's data offsets fall outside the data section or overlap."""


class NonFiniteValue(NegMergeError):
    """A tensor contains NaN/Inf and non-finite values were not opted into."""


class SchemaMismatch(NegMergeError):
    """Two tensor collections disagree on names, dtypes, or shapes.

    ``name`` is the first offending tensor, ``reason`` one of
    ``missing``/``dtype``/``shape``.
    """

    def __init__(self, name: str, reason: str):
        self.name = name
        self.reason = reason
        super().__init__(f"schema mismatch at tensor {name!r}: {reason}")


class EmptyPool(NegMergeError):
    """A merge was requested over zero task vectors."""


class PoolTooSmall(NegMergeError):
    """The strategy needs more pool members than were supplied."""


class NoVectorsAbsorbed(NegMergeError):
    """finalize() was called on a consensus state that never saw an update."""


class NoFeasibleLambda(NegMergeError):
    """No grid point satisfies the retain-accuracy floor."""


class TrainingDiverged(NegMergeError):
    """The training loss became non-finite."""


class GroupingError(NegMergeError):
    """Tensor grouping is ambiguous or impossible for the given schema."""


class ExperimentStageError(NegMergeError):
    """An experiment pipeline stage failed; ``stage`` names the stage."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"experiment stage {stage!r} failed: {cause}")


class InvalidSpec(NegMergeError):
    """A merge/negation/experiment configuration value is out of range."""
