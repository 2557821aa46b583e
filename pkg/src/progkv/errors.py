"""Exception hierarchy shared by all progkv modules."""


class ProgKVError(Exception):
    """Base class for every error raised by the toolkit."""


class TensorFormatError(ProgKVError, ValueError):
    """Bad magic, unknown version or dtype code in a tensor file."""


class TensorLengthError(ProgKVError, ValueError):
    """Tensor file payload shorter than its header declares."""


class NumericError(ProgKVError, ValueError):
    """Non-finite input where finite values are required."""


class CapacityError(ProgKVError, RuntimeError):
    """The cache cannot hold another token even with every segment at Fbit."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class EmptyStateError(ProgKVError, RuntimeError):
    """Read from a cache that holds no tokens."""


class InfeasibleBudgetError(ProgKVError, ValueError):
    """Memory budget below the cheapest possible allocation."""

    def __init__(self, budget, min_budget):
        super().__init__(
            f"budget {budget} bytes is infeasible; minimum feasible budget is {min_budget} bytes"
        )
        self.budget = budget
        self.min_budget = min_budget


class ConfigError(ProgKVError, ValueError):
    """Malformed or unknown configuration keys."""
