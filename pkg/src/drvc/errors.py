"""Exception types shared across the package."""


class DRVCError(Exception):
    """Base class for all package errors."""


class ConfigError(DRVCError, ValueError):
    """Bad configuration, manifest layout, or command-line usage."""


class EmptyInputError(DRVCError, ValueError):
    """Audio or feature input with nothing usable in it."""


class ContractError(DRVCError, ValueError):
    """Shape, dimension, or precondition violation at an API boundary."""


class TrainingDivergenceError(DRVCError, RuntimeError):
    """A loss or gradient became NaN/Inf.

    ``term`` names the offending loss term or parameter group.
    """

    def __init__(self, message: str, term: str | None = None):
        super().__init__(message)
        self.term = term
