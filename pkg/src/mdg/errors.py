"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller broke an operation's preconditions (shapes, ranges, validity)."""


class DomainError(ContractError):
    """A math function was evaluated outside its real domain."""


class DataError(Exception):
    """A dataset, checkpoint, or trace file is malformed or inconsistent."""


class NumericError(RuntimeError):
    """A non-finite value showed up where a finite one was required."""
