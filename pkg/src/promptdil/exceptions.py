"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A hyperparameter or configuration value is out of its valid range."""


class ContractError(ValueError):
    """An operation was called with inputs violating its preconditions."""


class StateError(RuntimeError):
    """The learner is not in a state that allows the requested step."""


class NumericalAbort(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, loss_name, value):
        super().__init__(f"non-finite value {value!r} for loss term {loss_name!r}")
        self.loss_name = loss_name
        self.value = value


class CheckpointError(RuntimeError):
    """Base class for checkpoint loading failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    pass
