"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration. ``errors`` lists every violation found."""

    def __init__(self, message, errors=None):
        self.errors = list(errors or [message])
        super().__init__(message if errors is None else "; ".join(self.errors))


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shape, index, missing key)."""


class NumericError(FloatingPointError):
    """Non-finite values or degenerate numerics surfaced instead of propagated."""


class InitializationError(ValueError):
    """A prototype could not be initialized from the data given."""


class NoNeighborError(LookupError):
    """No previous class exists to act as a nearest neighbour."""


class StageError(RuntimeError):
    """Wraps a failure inside an experiment stage, naming the task and stage."""

    def __init__(self, task, stage, cause):
        self.task = task
        self.stage = stage
        self.cause = cause
        super().__init__(f"task {task}, stage '{stage}': {cause!r}")
