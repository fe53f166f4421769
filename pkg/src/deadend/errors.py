"""Exception hierarchy.

Two families matter to callers (and to the CLI exit codes): input/contract
problems (``ContractError``, exit 2) and failures arising during computation
or from the data itself (``ComputeError``, exit 1).
"""


class DeadendError(Exception):
    """Base class for all library errors."""


class ContractError(DeadendError):
    """An input violated a documented precondition or schema."""


class ComputeError(DeadendError):
    """A computation failed or the data cannot support the request."""


# -- contract violations -----------------------------------------------------

class InvalidMDP(ContractError):
    pass


class InvalidLayout(ContractError):
    pass


class ShapeMismatch(ContractError):
    pass


class DimensionMismatch(ContractError):
    pass


class StaleInputs(ContractError):
    pass


class NonTabularData(ContractError):
    pass


class Unterminated(ContractError):
    pass


class EmptyCohort(ContractError):
    pass


class EmptyRow(ContractError):
    pass


class OutOfRange(ContractError):
    pass


class BadIndex(ContractError):
    pass


class ParseError(ContractError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ConfigError(ContractError):
    pass


class SchemaError(ContractError):
    pass


# -- computation / data failures ---------------------------------------------

class NoConvergence(ComputeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonTerminatingRegion(ComputeError):
    def __init__(self, message, states=()):
        super().__init__(message)
        self.states = tuple(states)


class GenerationFailed(ComputeError):
    pass


class YieldTooLow(ComputeError):
    pass


class EmptyBuffer(ComputeError):
    pass


class Diverged(ComputeError):
    pass


class DeadEndState(ComputeError):
    """No distribution can satisfy the security caps at this state."""


class NoEligibleTrajectories(ComputeError):
    pass
