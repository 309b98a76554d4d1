"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, malformed domain spec or bad sizes."""


class ShapeError(ValueError):
    """Tensor shapes or architectures do not line up."""


class IsolationError(RuntimeError):
    """A stage touched a dataset it is not allowed to see."""


class ContractError(RuntimeError):
    """A training-time contract was violated (e.g. a frozen module is trainable)."""


class NumericAbort(RuntimeError):
    """A loss became non-finite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(IOError):
    """Missing, corrupt or mismatching checkpoint file."""


class EmptyEvaluationError(ValueError):
    """Every class is undefined in a confusion matrix."""
