"""Exception types shared across the package."""


class TurbmitError(Exception):
    """Base class for all package errors."""


class DimensionError(TurbmitError, ValueError):
    """Array shapes or extents are incompatible with an operation."""


class ConfigError(TurbmitError, ValueError):
    """A configuration value or interval violates its constraints."""


class ContractError(TurbmitError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class InputError(TurbmitError, ValueError):
    """Input data is insufficient, e.g. too few frames in a sequence."""


class GenerationError(TurbmitError, RuntimeError):
    """Synthetic sample generation failed after all retries."""


class FormatError(TurbmitError, ValueError):
    """A file does not follow the expected binary or JSON layout."""


class CompatibilityError(TurbmitError, ValueError):
    """A checkpoint does not match the requested model configuration."""


class DivergenceError(TurbmitError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step, lr, last_finite_loss):
        self.step = step
        self.lr = lr
        self.last_finite_loss = last_finite_loss
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3e}, "
            f"last finite loss={last_finite_loss})"
        )


class FrameShortageError(InputError):
    """A sequence holds fewer frames than the model consumes."""

    def __init__(self, needed, available):
        self.needed = needed
        self.available = available
        super().__init__(f"need {needed} frames, sequence has {available}")
