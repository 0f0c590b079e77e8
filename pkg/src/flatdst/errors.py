"""Exception types shared across the package."""


class FlatDstError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(FlatDstError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class InvalidMaskError(FlatDstError, ValueError):
    """Attention mask is malformed (e.g. a fully-masked row)."""


class ContractError(FlatDstError, ValueError):
    """A documented precondition or invariant was violated by the caller."""


class DeterminismError(FlatDstError, RuntimeError):
    """A closure expected to be deterministic returned different values."""


class VocabularyError(FlatDstError, ValueError):
    """Token, position, or type id outside its embedding table."""


class DatasetParseError(FlatDstError, ValueError):
    """Dataset file failed to parse; message carries line number and dialogue id."""


class InvalidReuseSpecError(FlatDstError, ValueError):
    """Re-use selector resolved to an empty or unknown position set."""


class CheckpointError(FlatDstError, ValueError):
    """Checkpoint file is malformed or inconsistent with the model config."""


class NonFiniteLossError(FlatDstError, ArithmeticError):
    """Training loss became NaN/Inf; message carries step and batch id."""


class UsageError(FlatDstError, ValueError):
    """Bad command-line flags or config file contents."""
