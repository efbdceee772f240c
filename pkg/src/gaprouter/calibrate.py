"""Fit the relaxation threshold from a calibration sample.

The threshold is the smallest grid point where the inflated empirical risk
``n/(n+1) * R_n(lam) + B/(n+1)`` is at most alpha. Every per-sample loss
curve is non-increasing in lambda, so the left-hand side is monotone and the
smallest qualifying grid point can be located by bisection over grid
indices; the answer is identical to a left-to-right scan.

Sums use ``math.fsum`` (correctly rounded), which keeps results bit-stable
regardless of how samples are ordered or batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np

from .core import MEMBERSHIP_EPS, RiskBudget, ScoredInstance
from .errors import BudgetInfeasible, InvalidInput


@dataclass(frozen=True)
class LambdaGrid:
    """Evenly spaced thresholds ``start + i * step`` for ``i < count``."""

    start: float = 0.0
    step: float = 0.01
    count: int = 101
    auto_extend: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.start) and self.start >= 0):
            raise InvalidInput("grid start must be finite and >= 0")
        if not (math.isfinite(self.step) and self.step > 0):
            raise InvalidInput("grid step must be finite and > 0")
        if self.count < 2:
            raise InvalidInput("grid needs at least 2 points")

    @cached_property
    def _points(self) -> np.ndarray:
        # Rounding keeps decimal grids clean (0.07 rather than 0.07000000000000001).
        pts = np.round(self.start + self.step * np.arange(self.count), 12)
        pts.flags.writeable = False
        return pts

    def points(self) -> np.ndarray:
        return self._points

    def covering(self, upper: float) -> "LambdaGrid":
        """This grid, lengthened (when ``auto_extend``) until it reaches ``upper``."""
        if not self.auto_extend:
            return self
        last = self.start + self.step * (self.count - 1)
        if last >= upper:
            return self
        extra = math.ceil((upper - last) / self.step - 1e-9)
        grid = LambdaGrid(self.start, self.step, self.count + extra, True)
        while grid.points()[-1] < upper:
            grid = LambdaGrid(grid.start, grid.step, grid.count + 1, True)
        return grid

    @classmethod
    def spanning(cls, lo: float, hi: float, step: float, auto_extend: bool = False) -> "LambdaGrid":
        count = int(round((hi - lo) / step)) + 1
        return cls(lo, step, count, auto_extend)


class LossCurves(Protocol):
    """Per-sample non-increasing loss curves evaluated at a threshold."""

    n: int

    def losses(self, lam: float) -> np.ndarray: ...

    def full_range(self) -> float:
        """A threshold at or beyond which every loss is zero."""
        ...


class InstanceLossCurves:
    """Residual-loss curves of scored instances, evaluated in one vector pass.

    Each instance's actions are sorted by their distance below the top
    Primary score; the best Guardian score among the first k of them is a
    prefix maximum, so the candidate set at any lambda is a prefix.
    """

    def __init__(self, samples: Sequence[ScoredInstance]):
        if not samples:
            raise InvalidInput("empty calibration sample")
        self.n = len(samples)
        width = max(s.n_actions for s in samples)
        gaps = np.full((self.n, width), np.inf)
        prefix_best = np.zeros((self.n, width))
        gmax = np.empty(self.n)
        for i, s in enumerate(samples):
            p = s.primary_scores.as_array()
            g = s.require_guardian().as_array()
            d = p.max() - p
            order = np.argsort(d, kind="stable")
            k = len(order)
            gaps[i, :k] = d[order]
            prefix_best[i, :k] = np.maximum.accumulate(g[order])
            prefix_best[i, k:] = prefix_best[i, k - 1]
            gmax[i] = g.max()
        self._gaps = gaps
        self._prefix_best = prefix_best
        self._gmax = gmax
        self._rows = np.arange(self.n)
        finite = gaps[np.isfinite(gaps)]
        self._range = float(finite.max()) if finite.size else 0.0

    def losses(self, lam: float) -> np.ndarray:
        members = np.count_nonzero(self._gaps <= lam + MEMBERSHIP_EPS, axis=1)
        return self._gmax - self._prefix_best[self._rows, members - 1]

    def full_range(self) -> float:
        return self._range


@dataclass(frozen=True)
class CalibrationResult:
    lambda_hat: float
    n: int
    feasible: bool
    budget: RiskBudget
    risk_curve: list[tuple[float, float]] = field(default_factory=list)
    risk_at_lambda_hat: float = math.nan

    def to_dict(self) -> dict:
        return {
            "lambda_hat": self.lambda_hat,
            "feasible": self.feasible,
            "n": self.n,
            "alpha": self.budget.alpha,
            "loss_bound": self.budget.loss_bound_b,
            "risk_at_lambda_hat": self.risk_at_lambda_hat,
            "risk_curve": [[lam, r] for lam, r in self.risk_curve],
        }


def mean_loss(losses) -> float:
    return math.fsum(losses.tolist() if isinstance(losses, np.ndarray) else losses) / len(losses)


def crc_satisfied(risk: float, n: int, budget: RiskBudget) -> bool:
    """The calibration inequality at one threshold."""
    return (n / (n + 1)) * risk + budget.loss_bound_b / (n + 1) <= budget.alpha


def check_budget(n: int, budget: RiskBudget) -> None:
    if n < 1:
        raise InvalidInput("calibration needs at least one sample")
    if budget.loss_bound_b / (n + 1) > budget.alpha:
        raise BudgetInfeasible(budget.alpha, budget.loss_bound_b, n)


def empirical_risk(samples: Sequence[ScoredInstance], lam: float) -> float:
    """Mean residual loss over ``samples`` at threshold ``lam``."""
    if not samples:
        raise InvalidInput("empirical risk of an empty sample")
    return mean_loss(InstanceLossCurves(samples).losses(float(lam)))


def fit_curves(
    curves: LossCurves,
    budget: RiskBudget,
    grid: LambdaGrid,
    with_curve: bool = True,
) -> CalibrationResult:
    """Smallest grid threshold meeting the budget for arbitrary loss curves."""
    n = curves.n
    check_budget(n, budget)
    grid = grid.covering(curves.full_range())
    lams = grid.points()
    cache: dict[int, float] = {}

    def risk(i: int) -> float:
        if i not in cache:
            cache[i] = mean_loss(curves.losses(float(lams[i])))
        return cache[i]

    last = len(lams) - 1
    if not crc_satisfied(risk(last), n, budget):
        hat, feasible = last, False
    else:
        lo, hi = -1, last  # invariant: fails at lo (or lo is before the grid), holds at hi
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if crc_satisfied(risk(mid), n, budget):
                hi = mid
            else:
                lo = mid
        hat, feasible = hi, True
    curve = [(float(lam), risk(i)) for i, lam in enumerate(lams)] if with_curve else []
    return CalibrationResult(float(lams[hat]), n, feasible, budget, curve, risk(hat))


def fit_lambda(
    samples: Sequence[ScoredInstance],
    budget: RiskBudget,
    grid: LambdaGrid,
    with_curve: bool = True,
) -> CalibrationResult:
    """Calibrate the relaxation threshold on scored instances."""
    if not samples:
        raise InvalidInput("empty calibration sample")
    return fit_curves(InstanceLossCurves(samples), budget, grid, with_curve)


def risk_curve(samples: Sequence[ScoredInstance], grid: LambdaGrid) -> list[tuple[float, float]]:
    """Empirical risk at every grid point."""
    curves = InstanceLossCurves(samples)
    lams = grid.covering(curves.full_range()).points()
    return [(float(lam), mean_loss(curves.losses(float(lam)))) for lam in lams]
