"""Exception types shared across the library."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row contains no finite (unmasked) entry."""


class ConfigurationError(ValueError):
    """A configuration field or cross-field constraint is invalid."""


class LabelError(ValueError):
    """A class label lies outside the valid range."""


class ParameterError(ValueError):
    """A hyperparameter value is out of its valid domain."""


class RefinementError(RuntimeError):
    """Pseudo-label refinement cannot proceed (e.g. no active class)."""


class IngestionError(ValueError):
    """An on-disk dataset is malformed."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or mismatches the model config."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested for a zero-norm vector."""
