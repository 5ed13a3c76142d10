"""Exception types raised across the package."""


class MTLoRAError(Exception):
    """Base class for all package errors."""


class DimensionError(MTLoRAError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(MTLoRAError, ValueError):
    """A model, adapter or task configuration is inconsistent."""


class UsageError(MTLoRAError, RuntimeError):
    """An API was called in a state that does not support it."""


class DomainError(MTLoRAError, ValueError):
    """A numeric argument is outside the domain of the function."""


class FormatError(MTLoRAError, ValueError):
    """A checkpoint or dataset file does not match the expected layout."""


class NonFiniteLossError(MTLoRAError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, task, value):
        super().__init__(f"non-finite loss {value!r} for task {task!r}")
        self.task = task
        self.value = value
