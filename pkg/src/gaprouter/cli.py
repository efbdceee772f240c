"""Command-line entry point: calibrate, route, evaluate, simulate, report.

Exit codes: 0 success, 2 invalid input, 3 infeasible budget, 4 a requested
assertion failed, 1 anything else (for example an unreachable scorer).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .calibrate import LambdaGrid, fit_lambda
from .core import RiskBudget, binarize_guardian
from .costmodel import load_price_sheet, routed_cost
from .errors import BudgetInfeasible, InvalidInput, ScorerUnavailable
from .evaluation import TrialConfig, run_trials
from .providers import ScorerEndpoint, load_records, remote_guardian
from .route import RoutingPolicy, decide
from .theory import FAMILIES, MIN_RATE_REPS, convergence_study, risk_guarantee_mc

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_INFEASIBLE, EXIT_ASSERT = 0, 1, 2, 3, 4

log = logging.getLogger("gaprouter")


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class _Run:
    """Collects outputs of one command and writes the manifest next to them."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.started = datetime.now(timezone.utc).isoformat()
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def add_input(self, path) -> None:
        if path and Path(path).is_file():
            self.inputs[str(path)] = _sha256(Path(path))

    def write(self, path: Path, text: str) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        self.outputs.append(str(path))

    def manifest(self, path: Path, config: dict) -> None:
        doc = {
            "command": self.command,
            "config": config,
            "seed": getattr(self.args, "seed", None),
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": __version__,
            "started_at": self.started,
            "finished_at": datetime.now(timezone.utc).isoformat(),
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(_dump_json(doc), encoding="utf-8")


def _grid(args) -> LambdaGrid:
    return LambdaGrid(args.grid_start, args.grid_step, args.grid_count, args.auto_extend)


def _grid_config(args) -> dict:
    return {"start": args.grid_start, "step": args.grid_step, "count": args.grid_count,
            "auto_extend": args.auto_extend}


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_calibrate(args) -> int:
    run = _Run("calibrate", args)
    run.add_input(args.records)
    samples = load_records(args.records)
    if args.binarize:
        samples = [binarize_guardian(s) for s in samples]
    budget = RiskBudget(args.alpha, args.loss_bound)
    config = {"alpha": args.alpha, "loss_bound": args.loss_bound, "binarize": args.binarize,
              "grid": _grid_config(args)}
    try:
        result = fit_lambda(samples, budget, _grid(args))
        doc = result.to_dict()
        code = EXIT_OK if result.feasible else EXIT_INFEASIBLE
        if not result.feasible:
            print("no grid point satisfies the budget; reporting the grid maximum", file=sys.stderr)
    except BudgetInfeasible as exc:
        doc = {"alpha": args.alpha, "loss_bound": args.loss_bound, "n": exc.n, "feasible": False,
               "error": str(exc), "min_n": exc.min_n}
        print(str(exc), file=sys.stderr)
        code = EXIT_INFEASIBLE
    _emit(run, args.out, _dump_json(doc), config)
    return code


def _emit(run: _Run, out, text: str, config: dict) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out = Path(out)
    run.write(out, text)
    run.manifest(out.with_name(out.name + ".manifest.json"), config)


def cmd_route(args) -> int:
    run = _Run("route", args)
    run.add_input(args.records)
    run.add_input(args.price_sheet)
    prices = load_price_sheet(args.price_sheet)
    policy = RoutingPolicy(args.lam, "unrestricted" if args.unrestricted else "restricted")
    provider = None
    if args.scorer_url:
        provider = remote_guardian(ScorerEndpoint(args.scorer_url, args.scorer_timeout_ms, args.scorer_retries))
    lines = []
    for inst in load_records(args.records):
        d = decide(inst, policy, provider)
        rec = {"id": inst.id, "chosen_index": d.chosen_index, "chosen_action": inst.actions[d.chosen_index],
               "actor": d.actor, "candidate_count": d.candidate_count, "deferred": d.deferred}
        if prices is not None and inst.tokens is not None:
            rec["cost"] = routed_cost(inst.tokens, prices, d)
        lines.append(json.dumps(rec, sort_keys=True))
    text = "".join(line + "\n" for line in lines)
    _emit(run, args.out, text, {"lambda": args.lam, "variant": policy.variant,
                                "price_sheet": prices.to_dict() if prices else None})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = _Run("evaluate", args)
    run.add_input(args.records)
    run.add_input(args.price_sheet)
    dataset = load_records(args.records)
    split = "exhaustive" if args.exhaustive else ("stratified" if args.stratify_key else "uniform")
    config = TrialConfig(
        trials=args.trials, calib_size=args.calib_size, eval_size=args.eval_size, alphas=args.alphas,
        grid=_grid(args), loss_bound=args.loss_bound,
        variant="unrestricted" if args.unrestricted else "restricted", seed=args.seed, split=split,
        stratify_key=args.stratify_key, binarize=args.binarize, utility=args.utility,
        guardrail=args.guardrail, prices=load_price_sheet(args.price_sheet),
        cost_matched=not args.no_cost_matched, fixed_qs=args.baselines, jobs=args.jobs,
    )
    report = run_trials(dataset, config)
    out = Path(args.out_dir)
    run.write(out / "report.csv", report.table())
    run.write(out / "frontier.json", _dump_json(report.to_dict()))
    run.manifest(out / "manifest.json", config.snapshot())
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_simulate(args) -> int:
    run = _Run("simulate", args)
    family = FAMILIES[args.family]
    report = convergence_study(family, args.alpha, args.n_list, args.reps, args.seed,
                               grid_step=args.grid_step, jobs=args.jobs)
    doc = report.to_dict()
    doc["family"] = args.family
    code = EXIT_OK
    if args.assert_rate:
        if not report.rate_testable:
            doc["assertion"] = "unavailable"
            print(f"rate assertion unavailable (needs reps >= {MIN_RATE_REPS} and positive regrets)",
                  file=sys.stderr)
        else:
            passed = report.slope <= args.max_slope
            doc["assertion"] = "pass" if passed else "fail"
            if not passed:
                print(f"slope {report.slope:.3f} > {args.max_slope}", file=sys.stderr)
                code = EXIT_ASSERT
    if args.guarantee_n:
        checks = []
        for n in args.guarantee_n:
            c = risk_guarantee_mc(family, args.alpha, n, max(args.reps, 2), args.seed)
            checks.append({"n": n, "mean_loss": c.mean_loss, "std_error": c.std_error,
                           "mean_true_risk": c.mean_true_risk, "lower_bound": c.lower_bound})
        doc["guarantee"] = checks
    config = {"family": args.family, "alpha": args.alpha, "n_list": list(args.n_list), "reps": args.reps,
              "grid_step": args.grid_step, "guarantee_n": list(args.guarantee_n or ())}
    if args.out:
        out = Path(args.out)
        run.write(out, _dump_json(doc))
        run.write(out.with_suffix(".csv"), report.table())
        run.manifest(out.with_name(out.name + ".manifest.json"), config)
    else:
        sys.stdout.write(_dump_json(doc))
    return code


def cmd_report(args) -> int:
    doc = json.loads(Path(args.frontier).read_text(encoding="utf-8"))
    rows = doc.get("rows")
    if not isinstance(rows, list):
        raise InvalidInput(f"{args.frontier}: not a frontier report")
    if args.format == "markdown":
        sys.stdout.write(_markdown(rows))
    else:
        from .evaluation import TABLE_COLUMNS
        sep = "\t" if args.format == "tsv" else ","
        sys.stdout.write(sep.join(TABLE_COLUMNS) + "\n")
        for r in rows:
            sys.stdout.write(sep.join("" if r.get(c) is None else str(r[c]) for c in TABLE_COLUMNS) + "\n")
    return EXIT_OK


def _pm(mean, std, fmt="{:.3f}") -> str:
    if mean is None:
        return "--"
    return f"{fmt.format(mean)} ± {fmt.format(std)}"


def _markdown(rows) -> str:
    head = "| Policy | Utility | Guardrail | Cost ($/1000) | lambda | Delta | Guardian % |\n"
    head += "|---|---|---|---|---|---|---|\n"
    body = ""
    for r in rows:
        delta = "--" if r.get("delta") is None else f"{r['delta']:+.3f}"
        body += (f"| {r['policy']} | {_pm(r['utility_mean'], r['utility_std'])} "
                 f"| {_pm(r['guardrail_mean'], r['guardrail_std'])} | {_pm(r['cost_mean'], r['cost_std'])} "
                 f"| {_pm(r['lambda_mean'], r['lambda_std'])} | {delta} "
                 f"| {_pm(r['guardian_pct_mean'], r['guardian_pct_std'], '{:.1f}')} |\n")
    return head + body


def _add_grid(p) -> None:
    p.add_argument("--grid-start", type=float, default=0.0)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--grid-count", type=int, default=101)
    p.add_argument("--auto-extend", action="store_true", help="lengthen the grid to the observed score range")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gaprouter", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="fit the threshold on a record file")
    p.add_argument("records")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--loss-bound", "-B", type=float, default=1.0)
    p.add_argument("--binarize", action="store_true", help="0/1 Guardian scores from labels.correct_index")
    p.add_argument("--out", help="report path (default: stdout)")
    _add_grid(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("route", help="route every record with a given threshold")
    p.add_argument("records")
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--unrestricted", action="store_true", help="Guardian chooses among all actions")
    p.add_argument("--price-sheet", help="per-token prices (default: $GAPROUTER_PRICE_SHEET)")
    p.add_argument("--scorer-url", help="fetch missing Guardian scores from this endpoint")
    p.add_argument("--scorer-timeout-ms", type=int, default=10_000)
    p.add_argument("--scorer-retries", type=int, default=2)
    p.add_argument("--out", help="decisions file (default: stdout)")
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("evaluate", help="repeated-split frontier evaluation")
    p.add_argument("records")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--calib-size", type=int, default=400)
    p.add_argument("--eval-size", type=int)
    p.add_argument("--alphas", type=_floats, default=(0.25, 0.20, 0.15, 0.10, 0.05))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-bound", "-B", type=float, default=1.0)
    p.add_argument("--unrestricted", action="store_true")
    p.add_argument("--stratify-key", help="meta field to balance splits on")
    p.add_argument("--exhaustive", action="store_true", help="use every calibration subset once")
    p.add_argument("--price-sheet")
    p.add_argument("--baselines", type=_floats, default=(), help="fixed Guardian probabilities, e.g. 0.2,0.5")
    p.add_argument("--no-cost-matched", action="store_true")
    p.add_argument("--binarize", action="store_true")
    p.add_argument("--utility", choices=("accuracy", "helpful"), default="accuracy")
    p.add_argument("--guardrail", choices=("residual", "severity"), default="residual")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default="evaluation")
    _add_grid(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="synthetic convergence study")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--n-list", type=_ints, default=(50, 100, 200, 400, 800))
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--family", choices=sorted(FAMILIES), default="uniform")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-step", type=float, default=1e-5)
    p.add_argument("--guarantee-n", type=_ints, help="also run the fresh-draw risk check at these n")
    p.add_argument("--assert-rate", action="store_true", help="exit 4 unless the log-log slope is small enough")
    p.add_argument("--max-slope", type=float, default=-0.8)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="render a frontier.json as a table")
    p.add_argument("frontier")
    p.add_argument("--format", choices=("csv", "tsv", "markdown"), default="markdown")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BudgetInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ScorerUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
