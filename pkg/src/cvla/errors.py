"""Exception hierarchy shared by all cvla modules."""


class CvlaError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CvlaError):
    """Tensor shapes are incompatible for the requested operation."""


class ArgumentError(CvlaError):
    """An argument is outside its documented domain."""


class NumericError(CvlaError):
    """A computation produced or received non-finite values."""


class StateError(CvlaError):
    """An object was used in a way its lifecycle forbids."""


class EmptyMaskError(CvlaError):
    """An instance mask with zero true pixels was passed where one is required."""


class CapacityError(CvlaError):
    """More objects than the configured slot capacity."""


class PlacementError(CvlaError):
    """Scene placement could not satisfy clearance constraints."""


class ExpertError(CvlaError):
    """The scripted expert cannot make progress from the current state."""


class RolloutError(CvlaError):
    """A demonstration rollout failed and must be discarded."""


class GenerationError(CvlaError):
    """Dataset generation exceeded the allowed expert failure budget."""


class DatasetError(CvlaError):
    """A dataset does not satisfy the preconditions of the requested run."""


class FormatError(CvlaError):
    """A file is not a well-formed container (bad magic, version, truncation)."""


class SchemaError(CvlaError):
    """A well-formed file does not match the expected tensor/field schema."""


class EquivalenceError(CvlaError):
    """Grafted expert failed the exact equivalence-at-init assertion."""


class TrainingDiverged(NumericError):
    """Loss became non-finite during training; carries the failing step."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class ConfigError(CvlaError):
    """A configuration file or flag combination is invalid."""
