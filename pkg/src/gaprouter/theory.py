"""Synthetic laboratory for the finite-sample guarantee and the O(1/n) rate.

The default family draws per-sample loss curves ``L_i(lam) = B * 1{lam < d_i}``
with breakpoints ``d_i = lam_max * Beta(a, b)``, so the true risk is
``R(lam) = B * (1 - BetaCDF(lam / lam_max))`` and can be inverted exactly.
Utility is the straight line ``U(lam) = U_max * (1 - lam / lam_max)``.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .calibrate import LambdaGrid, fit_curves
from .core import RiskBudget
from .errors import InvalidInput


class StepLossCurves:
    """Loss ``B`` until the threshold reaches each sample's breakpoint, then 0."""

    def __init__(self, breakpoints: np.ndarray, loss_bound: float, lam_max: float):
        self._d = np.asarray(breakpoints, dtype=float)
        self._b = float(loss_bound)
        self._lam_max = float(lam_max)
        self.n = len(self._d)

    def losses(self, lam: float) -> np.ndarray:
        return np.where(self._d > lam, self._b, 0.0)

    def full_range(self) -> float:
        return self._lam_max


@dataclass(frozen=True)
class SyntheticFamily:
    beta_a: float = 1.0
    beta_b: float = 1.0
    lam_max: float = 1.0
    loss_bound: float = 1.0
    utility_max: float = 1.0

    def __post_init__(self):
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise InvalidInput("Beta parameters must be positive")
        if self.lam_max <= 0 or self.loss_bound <= 0 or self.utility_max <= 0:
            raise InvalidInput("lam_max, loss bound and utility_max must be positive")

    @property
    def lipschitz(self) -> float:
        return self.utility_max / self.lam_max

    def risk(self, lam):
        """True expected loss at ``lam`` (scalar or array)."""
        x = np.clip(np.asarray(lam, dtype=float) / self.lam_max, 0.0, 1.0)
        r = self.loss_bound * stats.beta.sf(x, self.beta_a, self.beta_b)
        return float(r) if np.ndim(r) == 0 else r

    def utility(self, lam):
        u = self.utility_max * (1.0 - np.asarray(lam, dtype=float) / self.lam_max)
        return float(u) if np.ndim(u) == 0 else u

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lam_max * rng.beta(self.beta_a, self.beta_b, size=n)

    def curves(self, breakpoints: np.ndarray) -> StepLossCurves:
        return StepLossCurves(breakpoints, self.loss_bound, self.lam_max)

    def loss(self, lam: float, breakpoint: float) -> float:
        return self.loss_bound if lam < breakpoint else 0.0


FAMILIES = {
    "uniform": SyntheticFamily(),
    "beta22": SyntheticFamily(beta_a=2.0, beta_b=2.0),
    "beta25": SyntheticFamily(beta_a=2.0, beta_b=5.0),
}


def lambda_star(family: SyntheticFamily, alpha: float, tol: float = 1e-9) -> float:
    """Smallest threshold whose true risk is at most ``alpha``, by bisection."""
    r0, r_end = family.risk(0.0), family.risk(family.lam_max)
    if alpha > r0 or alpha < r_end:
        raise InvalidInput(f"alpha={alpha} outside the risk range [{r_end}, {r0}]")
    if r0 <= alpha:
        return 0.0
    lo, hi = 0.0, family.lam_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if family.risk(mid) <= alpha:
            hi = mid
        else:
            lo = mid
    return hi


def rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


def theory_grid(family: SyntheticFamily, step: float) -> LambdaGrid:
    return LambdaGrid.spanning(0.0, family.lam_max, step)


@dataclass(frozen=True)
class RiskCheck:
    alpha: float
    n: int
    reps: int
    mean_loss: float
    std_error: float
    mean_true_risk: float
    true_risk_std_error: float
    mean_lambda_hat: float

    @property
    def lower_bound(self) -> float:
        """Lower end of the expected-loss sandwich, ``alpha - 2B/(n+1)``."""
        return self.alpha - 2.0 / (self.n + 1)


def risk_guarantee_mc(
    family: SyntheticFamily,
    alpha: float,
    n: int,
    reps: int,
    seed: int,
    grid_step: float = 1e-4,
) -> RiskCheck:
    """Fit on n draws, score one fresh draw; repeat and average.

    Besides the fresh-draw loss, the true risk at each fitted threshold is
    averaged too; it has the same expectation and far less noise.
    """
    if reps < 2:
        raise InvalidInput("need at least 2 replications for a standard error")
    budget = RiskBudget(alpha, family.loss_bound)
    grid = theory_grid(family, grid_step)
    hats = np.empty(reps)
    fresh = np.empty(reps)
    for rep in range(reps):
        d = family.draw(rep_rng(seed, rep), n + 1)
        hat = fit_curves(family.curves(d[:n]), budget, grid, with_curve=False).lambda_hat
        hats[rep] = hat
        fresh[rep] = family.loss(hat, d[n])
    true_risk = family.risk(hats)
    return RiskCheck(
        alpha, n, reps,
        float(fresh.mean()), float(fresh.std(ddof=1) / math.sqrt(reps)),
        float(true_risk.mean()), float(true_risk.std(ddof=1) / math.sqrt(reps)),
        float(hats.mean()),
    )


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    mean_regret: float
    regret_se: float
    mean_risk: float
    mean_lambda_hat: float


@dataclass(frozen=True)
class ConvergenceReport:
    alpha: float
    lambda_star: float
    lipschitz: float
    grid_step: float
    reps: int
    rows: tuple[ConvergenceRow, ...]
    slope: float
    rate_testable: bool

    @property
    def grid_slack(self) -> float:
        return self.lipschitz * self.grid_step

    def row(self, n: int) -> ConvergenceRow:
        return next(r for r in self.rows if r.n == n)

    def table(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(("n", "mean_regret", "regret_se", "mean_risk", "mean_lambda_hat"))
        for r in self.rows:
            w.writerow((r.n, repr(r.mean_regret), repr(r.regret_se), repr(r.mean_risk), repr(r.mean_lambda_hat)))
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "lambda_star": self.lambda_star,
            "lipschitz": self.lipschitz,
            "grid_step": self.grid_step,
            "reps": self.reps,
            "slope": _finite_or_none(self.slope),
            "rate_testable": self.rate_testable,
            "rows": [{k: _finite_or_none(v) for k, v in r.__dict__.items()} for r in self.rows],
        }


MIN_RATE_REPS = 200


def _finite_or_none(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def loglog_slope(ns: Sequence[int], regrets: Sequence[float]) -> float:
    """Least-squares slope of log regret on log n; NaN unless all regrets are positive."""
    if len(ns) < 2 or any(not r > 0 for r in regrets):
        return math.nan
    slope, _ = np.polyfit(np.log(ns), np.log(regrets), 1)
    return float(slope)


def _fit_nested(args) -> np.ndarray:
    family, alpha, ns, seed, grid_step, first, last = args
    budget = RiskBudget(alpha, family.loss_bound)
    grid = theory_grid(family, grid_step)
    hats = np.empty((len(ns), last - first))
    for k, rep in enumerate(range(first, last)):
        d = family.draw(rep_rng(seed, rep), ns[-1])
        for j, n in enumerate(ns):
            hats[j, k] = fit_curves(family.curves(d[:n]), budget, grid, with_curve=False).lambda_hat
    return hats


def convergence_study(
    family: SyntheticFamily,
    alpha: float,
    n_list: Sequence[int],
    reps: int,
    seed: int,
    grid_step: float = 1e-5,
    jobs: int = 1,
) -> ConvergenceReport:
    """Mean utility regret of the calibrated threshold against sample size.

    Each replication draws ``max(n_list)`` breakpoints once and calibrates on
    nested prefixes of them, so the estimates at different n share random
    numbers and their differences are less noisy.
    """
    ns = list(n_list)
    if not ns or any(b <= a for a, b in zip(ns, ns[1:])):
        raise InvalidInput("n_list must be non-empty and strictly increasing")
    if reps < 1:
        raise InvalidInput("reps must be >= 1")
    star = lambda_star(family, alpha)
    RiskBudget(alpha, family.loss_bound)
    bounds = np.linspace(0, reps, max(1, min(jobs, reps)) + 1).astype(int)
    chunks = [(family, alpha, tuple(ns), seed, grid_step, int(a), int(b)) for a, b in zip(bounds, bounds[1:])]
    if len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_fit_nested, chunks))
    else:
        parts = [_fit_nested(chunks[0])]
    hats = np.concatenate(parts, axis=1)
    u_star = family.utility(star)
    rows = []
    for j, n in enumerate(ns):
        regret = u_star - family.utility(hats[j])
        se = float(regret.std(ddof=1) / math.sqrt(reps)) if reps > 1 else math.nan
        rows.append(ConvergenceRow(n, float(regret.mean()), se, float(np.mean(family.risk(hats[j]))),
                                   float(hats[j].mean())))
    slope = loglog_slope(ns, [r.mean_regret for r in rows])
    return ConvergenceReport(alpha, star, family.lipschitz, grid_step, reps, tuple(rows), slope,
                             reps >= MIN_RATE_REPS and not math.isnan(slope))
