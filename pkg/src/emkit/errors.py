"""Exception types shared across emkit."""


class EmkitError(Exception):
    """Base class for all emkit errors."""


class ShapeError(EmkitError, ValueError):
    """Tensor shapes or dimensions are incompatible."""


class ConfigError(EmkitError, ValueError):
    """A configuration value is outside the supported set."""


class ContractError(EmkitError, ValueError):
    """A caller violated a documented precondition."""


class NonFiniteError(EmkitError, ValueError):
    """A tensor holds NaN or Inf entries."""


class DegenerateGridError(EmkitError, ValueError):
    """Latitude weights cannot be normalised (all rows at the poles)."""


class UndefinedMetricError(EmkitError, ValueError):
    """A metric is undefined for the given input, e.g. ACC of a zero field."""


class TrainingDiverged(EmkitError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
