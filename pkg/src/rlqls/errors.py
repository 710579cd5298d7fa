"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration and contract problems
exit with 2, capacity and runtime failures with 3.
"""


class ContractViolation(ValueError):
    """An argument violates a documented precondition (bad shape, index, ...)."""


class ConfigurationError(ValueError):
    """A run is set up inconsistently (missing annotation, schema violation, ...)."""


class CapacityError(RuntimeError):
    """A problem exceeds the size an exact method can handle."""


class TrainingError(RuntimeError):
    """Training produced a non-finite quantity or an actor failed persistently."""
