"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Malformed scores, records, flags or labels."""


class BudgetInfeasible(ValueError):
    """The risk budget cannot be met at any threshold for this sample size.

    Raised when ``B / (n + 1) > alpha``: even a zero empirical risk fails
    the calibration inequality.
    """

    def __init__(self, alpha: float, loss_bound: float, n: int):
        self.alpha = alpha
        self.loss_bound = loss_bound
        self.n = n
        self.min_n = minimum_calibration_size(alpha, loss_bound)
        super().__init__(
            f"budget alpha={alpha} infeasible with B={loss_bound} and n={n}: "
            f"need at least n={self.min_n} calibration samples"
        )


class ScorerUnavailable(RuntimeError):
    """Transport-level failure talking to a remote scorer after all retries."""


def minimum_calibration_size(alpha: float, loss_bound: float) -> int:
    """Smallest n with ``B / (n + 1) <= alpha``."""
    import math

    n = max(0, math.ceil(loss_bound / alpha) - 1)
    while loss_bound / (n + 1) > alpha:
        n += 1
    return n
