"""Exception taxonomy shared across the package.

Every error raised on a contract violation derives from FassError so the
CLI can turn any of them into a one-line diagnostic and a nonzero exit.
"""


class FassError(Exception):
    """Base class for all package errors."""


class ShapeError(FassError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(FassError, ValueError):
    """A configuration value violates an operation's preconditions."""


class ContractError(FassError, ValueError):
    """An argument violates an operation's calling contract."""


class StateError(FassError, RuntimeError):
    """An object was used in a state that forbids the operation."""


class SamplingExhaustedError(FassError, RuntimeError):
    """Rejection sampling failed to find an admissible draw."""


class FormatError(FassError, ValueError):
    """A persisted file does not match its declared layout."""


class GenerationError(FassError, RuntimeError):
    """Synthetic volume generation could not satisfy its constraints."""


class TrainingAborted(FassError, RuntimeError):
    """Training stopped early because the loss became non-finite."""
