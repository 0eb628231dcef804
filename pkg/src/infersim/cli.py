"""Command-line interface.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime error
(including a failed verification).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .catalog import ConstraintSet, load_catalog, select_model_naive, select_model_paragon
from .cloudmodel import cost_per_million, load_rate_card, make_cost_fn
from .engine import replay_verify
from .errors import ConfigurationError, InferSimError, ValidationError
from .experiment import compare, emit_plot_data, load_report, run_experiment
from .fixtures import default_rate_card_path, fixture_catalog_path
from .workload import gen_burst, gen_constant


def _cmd_run(args) -> int:
    result = run_experiment(args.config, echo=print)
    print(f"wrote comparison table to {result.table_path}")
    print(f"wrote plot data to {result.plot_path}")
    print(emit_plot_data(result.table), end="")
    return 0


def _cmd_compare(args) -> int:
    reports = [load_report(p) for p in args.reports]
    table = compare(reports, args.baseline)
    print(emit_plot_data(table), end="")
    return 0


def _cmd_verify(args) -> int:
    report = load_report(args.report)
    ok = replay_verify(report)
    print(f"{args.report}: {'PASS' if ok else 'FAIL'} "
          f"(vm={report.vm_cost}, serverless={report.serverless_cost})")
    return 0 if ok else 2


def _cmd_select(args) -> int:
    catalog = load_catalog(args.catalog if args.catalog else fixture_catalog_path())
    card = load_rate_card(args.rate_card if args.rate_card else default_rate_card_path())
    constraints = ConstraintSet(
        accuracy_min_pct=args.acc_min,
        latency_max_ms=args.lat_max,
        cost_budget_per_1m=args.cost_budget,
    )
    cost_fn = make_cost_fn(card, args.vm_type, args.rate)
    if args.naive:
        choice = select_model_naive(catalog, constraints, lambda m: cost_fn(m, constraints))
    else:
        choice = select_model_paragon(
            catalog, constraints, lambda m: cost_fn(m, constraints),
            hint_fn=lambda m: cost_per_million(
                m, card, args.vm_type, args.rate, latency_budget_ms=constraints.latency_max_ms
            )[1],
        )
    print(json.dumps({
        "model": choice.model_name,
        "deployment_hint": choice.deployment_hint,
        "estimated_cost_per_1m": str(choice.estimated_cost_per_1m) if choice.estimated_cost_per_1m is not None else None,
        "satisfied": choice.satisfied,
    }, indent=1))
    return 0


def _cmd_trace_gen(args) -> int:
    if args.shape == "constant":
        trace = gen_constant(args.rate, args.duration_s, jitter=args.jitter, seed=args.seed)
    else:
        trace = gen_burst(int(args.base_rate), int(args.peak_rate), int(args.peak_start_s),
                          int(args.peak_len_s), int(args.duration_s),
                          jitter=args.jitter, seed=args.seed)
    out = Path(args.output)
    out.write_text("".join(f"{t:g}\n" for t in trace.arrivals_ms))
    print(f"wrote {len(trace)} arrivals over {trace.duration_ms / 1000.0:g}s to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="infersim",
        description="Trace-driven simulation of ML inference serving cost and SLOs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="path to the experiment YAML/JSON config")
    p_run.set_defaults(func=_cmd_run)

    p_cmp = sub.add_parser("compare", help="compare existing report files")
    p_cmp.add_argument("reports", nargs="+", help="report JSON files")
    p_cmp.add_argument("--baseline", required=True, help="baseline policy kind")
    p_cmp.set_defaults(func=_cmd_compare)

    p_ver = sub.add_parser("verify", help="replay-verify a report's cost accounting")
    p_ver.add_argument("report", help="report JSON file")
    p_ver.set_defaults(func=_cmd_verify)

    p_sel = sub.add_parser("select", help="pick a model for given constraints")
    p_sel.add_argument("--catalog", help="catalog JSON (defaults to the shipped fixture)")
    p_sel.add_argument("--rate-card", help="rate card JSON (defaults to the shipped card)")
    p_sel.add_argument("--acc-min", type=float, required=True, help="minimum accuracy pct")
    p_sel.add_argument("--lat-max", type=float, required=True, help="maximum latency ms")
    p_sel.add_argument("--cost-budget", type=float, help="cost budget per 1M queries")
    p_sel.add_argument("--naive", action="store_true", help="use the accuracy-greedy baseline")
    p_sel.add_argument("--vm-type", default="m4.large")
    p_sel.add_argument("--rate", type=float, default=100.0, help="reference request rate for costing")
    p_sel.set_defaults(func=_cmd_select)

    p_trace = sub.add_parser("trace", help="trace utilities")
    trace_sub = p_trace.add_subparsers(dest="trace_command", required=True)
    p_gen = trace_sub.add_parser("gen", help="generate a synthetic trace file")
    p_gen.add_argument("shape", choices=["constant", "burst"])
    p_gen.add_argument("--rate", type=float, help="constant: requests per second")
    p_gen.add_argument("--base-rate", type=int, help="burst: base requests per second")
    p_gen.add_argument("--peak-rate", type=int, help="burst: peak requests per second")
    p_gen.add_argument("--peak-start-s", type=int, help="burst: peak window start")
    p_gen.add_argument("--peak-len-s", type=int, help="burst: peak window length")
    p_gen.add_argument("--duration-s", dest="duration_s", type=float, required=True)
    p_gen.add_argument("--jitter", choices=["none", "poisson"], default="none")
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("-o", "--output", required=True)
    p_gen.set_defaults(func=_cmd_trace_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except InferSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
