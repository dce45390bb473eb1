"""Exception hierarchy shared by every module."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class SingularMatrixError(ContractError):
    """A linear system is singular to working precision."""


class ConfigurationError(ValueError):
    """An experiment or channel configuration is invalid."""


class CapacityError(ValueError):
    """A request exceeds a hard size limit (e.g. exhaustive ML for large K)."""
