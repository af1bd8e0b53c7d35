"""Exception hierarchy shared across the toolkit.

Every error raised on purpose derives from OcclmError so the CLI can map
domain failures to exit code 1 and leave genuine bugs as tracebacks.
"""


class OcclmError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(OcclmError):
    """A configuration value violates a stated invariant."""


class DataError(OcclmError):
    """Input data is unusable (empty corpus, degenerate batch, ...)."""


class EncodingError(DataError):
    """Byte stream is not valid UTF-8."""

    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no


class ShapeError(OcclmError):
    """Tensor shapes are incompatible for the requested op."""


class LengthError(ShapeError):
    """A sequence is too long or too short for the model context."""


class TokenIndexError(OcclmError):
    """A token id falls outside the vocabulary."""


class ContractError(OcclmError):
    """An operation was called outside its contract (e.g. non-scalar backward root)."""


class NumericsError(OcclmError):
    """An op produced NaN/Inf; surfaced immediately, never propagated."""


class DivergenceError(OcclmError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, lr=None, batch_index=None, history=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.batch_index = batch_index
        self.history = history if history is not None else []


class CheckpointError(OcclmError):
    """Checkpoint file is unreadable or inconsistent with the current setup."""


class SweepError(OcclmError):
    """A hyperparameter sweep could not produce any completed trial."""
