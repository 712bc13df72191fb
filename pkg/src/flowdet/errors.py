"""Exception types shared across the package."""


class FlowDetError(Exception):
    """Base class for all package-specific errors."""


class InvalidBoxError(FlowDetError, ValueError):
    """Malformed box geometry (e.g. x2 < x1)."""


class InvalidStateError(FlowDetError, ValueError):
    """Non-finite or otherwise unusable numeric state."""


class ShapeMismatchError(FlowDetError, ValueError):
    """Operands whose shapes are required to agree do not."""


class DivergenceError(FlowDetError, ArithmeticError):
    """ODE integration produced a non-finite velocity or state."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class NumericError(FlowDetError, ArithmeticError):
    """Non-finite intermediate inside the model; carries the stage index."""

    def __init__(self, message: str, stage: int | None = None):
        super().__init__(message)
        self.stage = stage


class InfeasibleMatchError(FlowDetError, ValueError):
    """Assignment problem with more ground truths than predictions."""


class UndefinedMetricError(FlowDetError, ValueError):
    """Metric requested on data for which it is undefined (e.g. no GT at all)."""


class DatasetError(FlowDetError, ValueError):
    """Dataset files missing, malformed, or inconsistent."""


class ConfigMismatchError(FlowDetError, ValueError):
    """Checkpoint config hash does not match the requested configuration."""
