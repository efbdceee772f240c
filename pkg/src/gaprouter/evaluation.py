"""Repeated calibration/evaluation splits and frontier reports.

For every trial the dataset is split, a threshold is fitted per risk
budget on the calibration part, and the evaluation part is routed. Fixed
policies (Primary-only, Guardian-only) and random routers are scored on
the same evaluation split so every row of a report is comparable.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .calibrate import InstanceLossCurves, LambdaGrid, fit_curves
from .core import RiskBudget, ScoredInstance, binarize_guardian
from .costmodel import PriceSheet, per_thousand, routed_cost_pico, single_cost_pico
from .errors import BudgetInfeasible, InvalidInput
from .route import RoutingDecision, RoutingPolicy, decide, guardian_choice, primary_choice

Utility = Literal["accuracy", "helpful"]
Guardrail = Literal["residual", "severity"]
SplitMode = Literal["uniform", "stratified", "exhaustive"]

TABLE_COLUMNS = (
    "policy", "utility_mean", "utility_std", "guardrail_mean", "guardrail_std",
    "cost_mean", "cost_std", "lambda_mean", "lambda_std", "delta",
    "guardian_pct_mean", "guardian_pct_std",
)


def trial_rng(seed: int, trial: int, stream: int = 0) -> np.random.Generator:
    """Generator for one trial, derived by hashing (seed, trial, stream)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial, stream)))


# --- metrics -----------------------------------------------------------------

def _chosen(decisions) -> list[int]:
    return [d.chosen_index if isinstance(d, RoutingDecision) else int(d) for d in decisions]


def _check_aligned(decisions, instances) -> list[int]:
    chosen = _chosen(decisions)
    if len(chosen) != len(instances):
        raise InvalidInput(f"{len(chosen)} decisions for {len(instances)} instances")
    if not chosen:
        raise InvalidInput("metrics need at least one decision")
    return chosen


def accuracy_metric(decisions, instances: Sequence[ScoredInstance]) -> float:
    """Fraction of decisions picking the labelled correct action."""
    chosen = _check_aligned(decisions, instances)
    hits = 0
    for c, inst in zip(chosen, instances):
        if inst.labels.correct_index is None:
            raise InvalidInput(f"{inst.id}: accuracy needs labels.correct_index")
        hits += c == inst.labels.correct_index
    return hits / len(chosen)


def helpful_match_metric(decisions, instances: Sequence[ScoredInstance]) -> float:
    """Fraction of decisions picking the annotator-preferred action."""
    chosen = _check_aligned(decisions, instances)
    hits = 0
    for c, inst in zip(chosen, instances):
        if inst.labels.helpful_index is None:
            raise InvalidInput(f"{inst.id}: helpfulness needs labels.helpful_index")
        hits += c == inst.labels.helpful_index
    return hits / len(chosen)


def severity_loss_metric(decisions, instances: Sequence[ScoredInstance]) -> float:
    """Mean excess severity of the chosen action over the safest one."""
    chosen = _check_aligned(decisions, instances)
    total = 0
    for c, inst in zip(chosen, instances):
        sev = inst.labels.severities
        if sev is None:
            raise InvalidInput(f"{inst.id}: severity loss needs labels.severities")
        total += sev[c] - min(sev)
    return total / len(chosen)


def guardrail_residual_metric(decisions, instances: Sequence[ScoredInstance]) -> float:
    """Mean Guardian score given up by each choice, ``max g - g(chosen)``."""
    chosen = _check_aligned(decisions, instances)
    losses = []
    for c, inst in zip(chosen, instances):
        g = inst.require_guardian().values
        losses.append(max(g) - g[c])
    return math.fsum(losses) / len(losses)


UTILITY_METRICS = {"accuracy": accuracy_metric, "helpful": helpful_match_metric}
GUARDRAIL_METRICS = {"residual": guardrail_residual_metric, "severity": severity_loss_metric}


# --- splits -------------------------------------------------------------------

def uniform_split(n_data: int, calib_size: int, eval_size: int, rng: np.random.Generator):
    perm = rng.permutation(n_data)
    return perm[:calib_size].tolist(), perm[calib_size:calib_size + eval_size].tolist()


def stratified_split(
    dataset: Sequence[ScoredInstance],
    key: str,
    n_total: int,
    calib_size: int,
    rng: np.random.Generator,
) -> tuple[list[int], list[int]]:
    """Balanced draw of ``n_total`` items across strata, then a calib/eval cut.

    Every stratum contributes ``n_total // n_strata`` items; the remainder is
    taken one item each from randomly chosen strata with items to spare.
    """
    if not 0 < calib_size <= n_total:
        raise InvalidInput("need 0 < calib_size <= n_total")
    strata: dict[str, list[int]] = {}
    for i, inst in enumerate(dataset):
        value = inst.meta_value(key)
        if value is None:
            raise InvalidInput(f"{inst.id}: no meta field {key!r} to stratify on")
        strata.setdefault(value, []).append(i)
    names = sorted(strata)
    pools = {s: [strata[s][j] for j in rng.permutation(len(strata[s]))] for s in names}
    per = n_total // len(names)
    short = [s for s in names if len(pools[s]) < per]
    if short:
        raise InvalidInput(f"strata too small for {per} items each: {short[:5]}")
    taken = {s: per for s in names}
    remainder = n_total - per * len(names)
    while remainder:
        spare = [s for s in names if taken[s] < len(pools[s])]
        if not spare:
            raise InvalidInput(f"dataset too small for {n_total} stratified items")
        pick = rng.choice(len(spare), size=min(remainder, len(spare)), replace=False)
        for j in sorted(pick.tolist()):
            taken[spare[j]] += 1
        remainder -= len(pick)
    selected = [i for s in names for i in pools[s][:taken[s]]]
    selected = [selected[j] for j in rng.permutation(len(selected))]
    return selected[:calib_size], selected[calib_size:]


# --- random routers ---------------------------------------------------------------

def cost_matched_probability(cost_primary: float, cost_guardian: float, target: float) -> float:
    """Mixing weight q with ``q * cost_G + (1 - q) * cost_P = target``."""
    lo, hi = min(cost_primary, cost_guardian), max(cost_primary, cost_guardian)
    if not lo <= target <= hi:
        raise InvalidInput(f"target cost {target} outside [{lo}, {hi}]")
    if cost_guardian == cost_primary:
        return 0.0
    return (target - cost_primary) / (cost_guardian - cost_primary)


@dataclass(frozen=True)
class RandomRouterMetrics:
    q: float
    utility_mean: float
    utility_std: float
    guardrail_mean: float
    guardrail_std: float
    cost_mean: float | None
    cost_std: float | None
    guardian_pct_mean: float
    target_cost: float | None = None


@dataclass
class _EvalTable:
    """Per-instance facts of an evaluation set, computed once per trial."""

    instances: list
    primary: list[int]
    guardian: list[int]
    cost_p: list[int] | None
    cost_g: list[int] | None


def _eval_table(instances, prices: PriceSheet | None) -> _EvalTable:
    costs_ok = prices is not None and all(i.tokens is not None for i in instances)
    return _EvalTable(
        list(instances),
        [primary_choice(i) for i in instances],
        [guardian_choice(i) for i in instances],
        [single_cost_pico(i.tokens, prices, "primary") for i in instances] if costs_ok else None,
        [single_cost_pico(i.tokens, prices, "guardian") for i in instances] if costs_ok else None,
    )


def _score(chosen, to_guardian, costs, table: _EvalTable, scored, utility, guardrail):
    return {
        "utility": UTILITY_METRICS[utility](chosen, table.instances),
        "guardrail": GUARDRAIL_METRICS[guardrail](chosen, scored),
        "cost": per_thousand(costs) if costs is not None else None,
        "guardian_pct": 100.0 * sum(to_guardian) / len(to_guardian),
    }


def _random_route(table: _EvalTable, q: float, rng: np.random.Generator):
    to_guardian = (rng.random(len(table.instances)) < q).tolist()
    chosen = [g if t else p for t, g, p in zip(to_guardian, table.guardian, table.primary)]
    costs = None
    if table.cost_p is not None:
        costs = [cg if t else cp for t, cg, cp in zip(to_guardian, table.cost_g, table.cost_p)]
    return chosen, to_guardian, costs


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    return statistics.fmean(values), statistics.pstdev(values)


def _random_router(dataset, q, trials, seed, prices, utility, guardrail, binarize, target=None):
    if not 0 <= q <= 1:
        raise InvalidInput(f"routing probability must lie in [0, 1], got {q}")
    table = _eval_table(dataset, prices)
    scored = [binarize_guardian(i) for i in dataset] if binarize else list(dataset)
    runs = []
    for t in range(trials):
        chosen, to_g, costs = _random_route(table, q, trial_rng(seed, t, 1))
        runs.append(_score(chosen, to_g, costs, table, scored, utility, guardrail))
    u = _mean_std([r["utility"] for r in runs])
    g = _mean_std([r["guardrail"] for r in runs])
    c = _mean_std([r["cost"] for r in runs]) if table.cost_p is not None else (None, None)
    return RandomRouterMetrics(
        q, u[0], u[1], g[0], g[1], c[0], c[1],
        statistics.fmean(r["guardian_pct"] for r in runs), target,
    )


def random_router_fixed(
    dataset: Sequence[ScoredInstance],
    q: float,
    trials: int,
    seed: int,
    prices: PriceSheet | None = None,
    utility: Utility = "accuracy",
    guardrail: Guardrail = "residual",
    binarize: bool = False,
) -> RandomRouterMetrics:
    """Send each instance to the Guardian independently with probability q."""
    return _random_router(dataset, q, trials, seed, prices, utility, guardrail, binarize)


def random_router_cost_matched(
    dataset: Sequence[ScoredInstance],
    ca_cost: float,
    trials: int,
    seed: int,
    prices: PriceSheet,
    utility: Utility = "accuracy",
    guardrail: Guardrail = "residual",
    binarize: bool = False,
) -> RandomRouterMetrics:
    """Random router whose expected cost per 1000 equals ``ca_cost``."""
    table = _eval_table(dataset, prices)
    if table.cost_p is None:
        raise InvalidInput("cost matching needs token counts on every instance")
    q = cost_matched_probability(per_thousand(table.cost_p), per_thousand(table.cost_g), ca_cost)
    return _random_router(dataset, q, trials, seed, prices, utility, guardrail, binarize, ca_cost)


# --- trials -----------------------------------------------------------------------

@dataclass(frozen=True)
class TrialConfig:
    trials: int = 30
    calib_size: int = 400
    eval_size: int | None = None
    alphas: tuple[float, ...] = (0.25, 0.20, 0.15, 0.10, 0.05)
    grid: LambdaGrid = field(default_factory=LambdaGrid)
    loss_bound: float = 1.0
    variant: Literal["restricted", "unrestricted"] = "restricted"
    seed: int = 0
    split: SplitMode = "uniform"
    stratify_key: str | None = None
    binarize: bool = False
    utility: Utility = "accuracy"
    guardrail: Guardrail = "residual"
    prices: PriceSheet | None = None
    cost_matched: bool = True
    fixed_qs: tuple[float, ...] = ()
    jobs: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise InvalidInput("trials must be >= 1")
        if self.calib_size < 1:
            raise InvalidInput("calib_size must be >= 1")
        if self.eval_size is not None and self.eval_size < 1:
            raise InvalidInput("eval_size must be >= 1")
        if not self.alphas:
            raise InvalidInput("at least one alpha required")
        if self.split not in ("uniform", "stratified", "exhaustive"):
            raise InvalidInput(f"unknown split mode {self.split!r}")
        if self.split == "stratified" and not self.stratify_key:
            raise InvalidInput("stratified split needs stratify_key")
        if self.utility not in UTILITY_METRICS:
            raise InvalidInput(f"unknown utility metric {self.utility!r}")
        if self.guardrail not in GUARDRAIL_METRICS:
            raise InvalidInput(f"unknown guardrail metric {self.guardrail!r}")
        for q in self.fixed_qs:
            if not 0 <= q <= 1:
                raise InvalidInput(f"fixed routing probability {q} outside [0, 1]")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["prices"] = self.prices.to_dict() if self.prices else None
        d.pop("jobs")
        return d


@dataclass(frozen=True)
class PolicyRow:
    policy: str
    kind: str
    alpha: float | None
    q: float | None
    utility: tuple[float, float]
    guardrail: tuple[float, float]
    cost: tuple[float, float] | None
    lambda_hat: tuple[float, float] | None
    delta: float | None
    guardian_pct: tuple[float, float]
    trials_used: int

    def flat(self) -> dict:
        c = self.cost or (None, None)
        lam = self.lambda_hat or (None, None)
        return {
            "policy": self.policy,
            "utility_mean": self.utility[0], "utility_std": self.utility[1],
            "guardrail_mean": self.guardrail[0], "guardrail_std": self.guardrail[1],
            "cost_mean": c[0], "cost_std": c[1],
            "lambda_mean": lam[0], "lambda_std": lam[1],
            "delta": self.delta,
            "guardian_pct_mean": self.guardian_pct[0], "guardian_pct_std": self.guardian_pct[1],
        }


@dataclass(frozen=True)
class TrialReport:
    rows: tuple[PolicyRow, ...]
    trials: int
    diagnostics: dict
    runs: tuple[dict, ...] = ()

    def row(self, policy: str) -> PolicyRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def table(self, delimiter: str = ",") -> str:
        """Delimited report table, one line per policy."""
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in self.rows:
            flat = r.flat()
            w.writerow(["" if flat[c] is None else _fmt(flat[c]) for c in TABLE_COLUMNS])
        return buf.getvalue()

    def frontier_records(self) -> list[dict]:
        """Plot-ready points: one per policy."""
        out = []
        for r in self.rows:
            rec = r.flat()
            rec.update(kind=r.kind, alpha=r.alpha, q=r.q, trials_used=r.trials_used)
            out.append(rec)
        return out

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "rows": self.frontier_records(),
            "diagnostics": self.diagnostics,
            "runs": list(self.runs),
        }


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def ca_label(alpha: float, variant: str) -> str:
    star = "*" if variant == "unrestricted" else ""
    return f"CA{star} (alpha={alpha:g})"


def _run_one(args) -> dict:
    dataset, config, t, calib_idx, eval_idx = args
    calib = [dataset[i] for i in calib_idx]
    evals = [dataset[i] for i in eval_idx]
    if config.binarize:
        calib = [binarize_guardian(i) for i in calib]
        scored = [binarize_guardian(i) for i in evals]
    else:
        scored = evals
    table = _eval_table(evals, config.prices)
    out: dict = {"trial": t, "fixed": {}, "ca": {}, "random_matched": {}, "random_fixed": {}}

    cost_p = table.cost_p
    out["fixed"]["Primary"] = _score(table.primary, [False] * len(evals), cost_p, table, scored,
                                     config.utility, config.guardrail)
    out["fixed"]["Guardian"] = _score(table.guardian, [True] * len(evals), table.cost_g, table, scored,
                                      config.utility, config.guardrail)

    curves = InstanceLossCurves(calib)
    for a_i, alpha in enumerate(config.alphas):
        budget = RiskBudget(alpha, config.loss_bound)
        try:
            fit = fit_curves(curves, budget, config.grid, with_curve=False)
        except BudgetInfeasible:
            out["ca"][alpha] = {"status": "budget_infeasible"}
            continue
        if not fit.feasible:
            out["ca"][alpha] = {"status": "no_grid_point"}
            continue
        policy = RoutingPolicy(fit.lambda_hat, config.variant)
        decisions = [decide(i, policy) for i in evals]
        costs = None
        if table.cost_p is not None:
            costs = [routed_cost_pico(i.tokens, config.prices, d) for i, d in zip(evals, decisions)]
        m = _score([d.chosen_index for d in decisions], [d.deferred for d in decisions], costs,
                   table, scored, config.utility, config.guardrail)
        m.update(status="ok", lambda_hat=fit.lambda_hat,
                 set_size=statistics.fmean(d.candidate_count for d in decisions))
        out["ca"][alpha] = m

        if config.cost_matched:
            if costs is not None:
                try:
                    q = cost_matched_probability(per_thousand(table.cost_p), per_thousand(table.cost_g),
                                                 m["cost"])
                except InvalidInput:
                    out["random_matched"][alpha] = {"status": "cost_outside_bracket"}
                    continue
            else:
                q = m["guardian_pct"] / 100.0
            chosen, to_g, rcost = _random_route(table, q, trial_rng(config.seed, t, 2 + a_i))
            r = _score(chosen, to_g, rcost, table, scored, config.utility, config.guardrail)
            r.update(status="ok", q=q)
            out["random_matched"][alpha] = r

    for q_i, q in enumerate(config.fixed_qs):
        chosen, to_g, rcost = _random_route(table, q, trial_rng(config.seed, t, 1000 + q_i))
        out["random_fixed"][q] = _score(chosen, to_g, rcost, table, scored, config.utility, config.guardrail)
    return out


def _splits(dataset, config: TrialConfig):
    n_data = len(dataset)
    if config.split == "exhaustive":
        combos = list(itertools.combinations(range(n_data), config.calib_size))
        eval_size = config.eval_size or n_data - config.calib_size
        for calib in combos:
            chosen = set(calib)
            rest = [i for i in range(n_data) if i not in chosen]
            yield list(calib), rest[:eval_size]
        return
    eval_size = config.eval_size or n_data - config.calib_size
    if config.calib_size + eval_size > n_data:
        raise InvalidInput(
            f"dataset has {n_data} instances; need {config.calib_size} + {eval_size}"
        )
    for t in range(config.trials):
        rng = trial_rng(config.seed, t)
        if config.split == "stratified":
            yield stratified_split(dataset, config.stratify_key, config.calib_size + eval_size,
                                   config.calib_size, rng)
        else:
            yield uniform_split(n_data, config.calib_size, eval_size, rng)


def run_trials(
    dataset: Sequence[ScoredInstance],
    config: TrialConfig,
    splits: Iterable[tuple[Sequence[int], Sequence[int]]] | None = None,
) -> TrialReport:
    """Run the calibrate-route-score loop and aggregate over trials.

    ``splits`` overrides the split schedule with explicit index lists
    (calibration, evaluation) per trial. With ``config.split ==
    "exhaustive"`` every calibration subset of size ``calib_size`` is used
    once.
    """
    dataset = list(dataset)
    if not dataset:
        raise InvalidInput("empty dataset")
    if config.eval_size is None and config.calib_size >= len(dataset):
        raise InvalidInput(f"calib_size {config.calib_size} leaves no evaluation data")
    schedule = list(splits) if splits is not None else list(_splits(dataset, config))
    jobs = [(dataset, config, t, list(c), list(e)) for t, (c, e) in enumerate(schedule)]
    if config.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    return _aggregate(results, config)


def _agg_metric(runs, key):
    vals = [r[key] for r in runs]
    if any(v is None for v in vals):
        return None
    return _mean_std(vals)


def _aggregate(results: list[dict], config: TrialConfig) -> TrialReport:
    rows = []
    diag: dict = {"excluded": {}}
    n = len(results)

    def fixed_row(name, pct):
        runs = [r["fixed"][name] for r in results]
        return PolicyRow(name, name.lower(), None, None, _agg_metric(runs, "utility"),
                         _agg_metric(runs, "guardrail"), _agg_metric(runs, "cost"), None, None,
                         (pct, 0.0), n)

    rows.append(fixed_row("Primary", 0.0))
    per_trial_runs = []
    for alpha in config.alphas:
        ok = [r for r in results if r["ca"][alpha]["status"] == "ok"]
        bad = [r["ca"][alpha]["status"] for r in results if r["ca"][alpha]["status"] != "ok"]
        if bad:
            diag["excluded"][repr(alpha)] = {s: bad.count(s) for s in sorted(set(bad))}
        if not ok:
            continue
        ca = [r["ca"][alpha] for r in ok]
        delta = None
        pairs = [(r["ca"][alpha], r["random_matched"].get(alpha)) for r in ok]
        pairs = [(c, m) for c, m in pairs if m is not None and m.get("status") == "ok"]
        if config.cost_matched and pairs:
            delta = statistics.fmean(c["utility"] - m["utility"] for c, m in pairs)
        rows.append(PolicyRow(
            ca_label(alpha, config.variant), "ca", alpha, None,
            _agg_metric(ca, "utility"), _agg_metric(ca, "guardrail"), _agg_metric(ca, "cost"),
            _agg_metric(ca, "lambda_hat"), delta, _agg_metric(ca, "guardian_pct"), len(ok),
        ))
        for r in ok:
            c = r["ca"][alpha]
            per_trial_runs.append({"trial": r["trial"], "alpha": alpha, "lambda_hat": c["lambda_hat"],
                                   "utility": c["utility"], "guardrail": c["guardrail"],
                                   "cost": c["cost"], "guardian_pct": c["guardian_pct"],
                                   "set_size": c["set_size"]})
    rows.append(fixed_row("Guardian", 100.0))

    if config.cost_matched:
        for alpha in config.alphas:
            runs = [r["random_matched"].get(alpha) for r in results]
            skipped = [m["status"] for m in runs if m is not None and m["status"] != "ok"]
            if skipped:
                diag["excluded"].setdefault("random_matched", {})[repr(alpha)] = len(skipped)
            runs = [m for m in runs if m is not None and m["status"] == "ok"]
            if not runs:
                continue
            rows.append(PolicyRow(
                f"Random cost-matched (alpha={alpha:g})", "random_matched", alpha,
                statistics.fmean(m["q"] for m in runs),
                _agg_metric(runs, "utility"), _agg_metric(runs, "guardrail"), _agg_metric(runs, "cost"),
                None, None, _agg_metric(runs, "guardian_pct"), len(runs),
            ))
    for q in config.fixed_qs:
        runs = [r["random_fixed"][q] for r in results]
        rows.append(PolicyRow(
            f"Random (q={q:g})", "random_fixed", None, q,
            _agg_metric(runs, "utility"), _agg_metric(runs, "guardrail"), _agg_metric(runs, "cost"),
            None, None, _agg_metric(runs, "guardian_pct"), len(runs),
        ))
    if not diag["excluded"]:
        diag = {}
    return TrialReport(tuple(rows), n, diag, tuple(per_trial_runs))
