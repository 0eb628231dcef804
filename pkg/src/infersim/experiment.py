"""Experiment runner and comparator.

One config file describes one reproducible experiment: a trace source, the
query mix, catalog and rate card paths, the policy grid and the baseline.
Running it produces one report per (policy, repetition) plus a normalized
comparison table and a plot-ready CSV, all under the output directory with
content-hash-stamped names (re-running an unchanged config rewrites identical
bytes).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Sequence

import yaml

from . import engine
from .catalog import ConstraintSet, ModelProfile, load_catalog
from .cloudmodel import RateCard, load_rate_card, make_cost_fn, vm_capacity
from .errors import ComparisonError, ConfigurationError, ValidationError
from .fixtures import default_rate_card_path, fixture_catalog_path
from .policies import PolicySpec, required_vms
from .workload import (
    ArrivalTrace,
    MixSpec,
    QuerySpec,
    assign_constraints,
    gen_burst,
    gen_constant,
    gen_per_second_rates,
    load_trace_csv,
)

POLICY_FIELDS = {
    "kind", "theta", "beta", "predictor_window_s", "tick_interval_s",
    "idle_timeout_s", "p2m_gate_pct", "p2m_window_s",
}
MIX_FIELDS = {
    "strict_fraction", "strict_slo_ms", "relaxed_slo_ms",
    "strict_accuracy_min_pct", "relaxed_accuracy_min_pct", "constraint_pool",
}
TRACE_KINDS = {"constant", "burst", "segments", "file"}
RUN_FIELDS = {"initial_vms", "max_vms", "keep_ledger", "strict_priority"}


@dataclass
class ExperimentConfig:
    trace: dict
    mix: MixSpec
    catalog_path: Path
    rate_card_path: Path
    policies: list[PolicySpec]
    baseline: str
    output_dir: Path
    seed: int = 0
    repetitions: int = 1
    vm_type: str = "m4.large"
    selection: str = "paragon"
    reference_rate_per_s: float = 100.0
    initial_vms: int | str = 0
    max_vms: int | None = None
    keep_ledger: bool = False
    strict_priority: bool = True

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        errors: list[str] = []
        try:
            raw = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        base = path.parent

        def resolve(p: str) -> Path:
            candidate = Path(p)
            return candidate if candidate.is_absolute() else base / candidate

        trace = raw.get("trace")
        if not isinstance(trace, dict) or trace.get("kind") not in TRACE_KINDS:
            errors.append(f"trace section must set kind to one of {sorted(TRACE_KINDS)}")
            trace = {"kind": "constant", "rate_per_s": 1, "duration_s": 1}
        if trace.get("kind") == "file":
            trace = dict(trace)
            trace_path = resolve(str(trace.get("path", "")))
            if not trace_path.is_file():
                errors.append(f"trace file not found: {trace_path}")
            trace["path"] = str(trace_path)

        mix_raw = raw.get("mix", {}) or {}
        mix = None
        if not isinstance(mix_raw, dict):
            errors.append("mix section must be a mapping")
        else:
            unknown = set(mix_raw) - MIX_FIELDS
            if unknown:
                errors.append(f"mix: unknown keys {sorted(unknown)}")
            else:
                try:
                    pool = mix_raw.get("constraint_pool")
                    pool_cs = tuple(ConstraintSet(**entry) for entry in pool) if pool else None
                    mix = MixSpec(
                        strict_fraction=float(mix_raw.get("strict_fraction", 0.5)),
                        strict_slo_ms=float(mix_raw.get("strict_slo_ms", 500.0)),
                        relaxed_slo_ms=float(mix_raw.get("relaxed_slo_ms", 5000.0)),
                        strict_accuracy_min_pct=float(mix_raw.get("strict_accuracy_min_pct", 70.0)),
                        relaxed_accuracy_min_pct=float(mix_raw.get("relaxed_accuracy_min_pct", 70.0)),
                        constraint_pool=pool_cs,
                        rng_seed=int(raw.get("seed", 0)),
                    )
                except (ValidationError, TypeError, ValueError) as exc:
                    errors.append(f"mix: {exc}")

        catalog_ref = raw.get("catalog", "fixture")
        catalog_path = fixture_catalog_path() if catalog_ref == "fixture" else resolve(str(catalog_ref))
        if not catalog_path.is_file():
            errors.append(f"catalog file not found: {catalog_path}")
        card_ref = raw.get("rate_card", "default")
        rate_card_path = default_rate_card_path() if card_ref == "default" else resolve(str(card_ref))
        if not rate_card_path.is_file():
            errors.append(f"rate card file not found: {rate_card_path}")

        policies: list[PolicySpec] = []
        for i, entry in enumerate(raw.get("policies") or []):
            if not isinstance(entry, dict):
                errors.append(f"policies[{i}] must be a mapping")
                continue
            unknown = set(entry) - POLICY_FIELDS
            if unknown:
                errors.append(f"policies[{i}]: unknown keys {sorted(unknown)}")
                continue
            try:
                policies.append(PolicySpec(**entry))
            except (ValidationError, TypeError) as exc:
                errors.append(f"policies[{i}]: {exc}")
        if not policies:
            errors.append("at least one policy is required")
        names = [p.kind for p in policies]
        if len(set(names)) != len(names):
            errors.append(f"duplicate policy kinds in {names}")

        baseline = raw.get("baseline", "reactive")
        if baseline not in names:
            errors.append(f"baseline {baseline!r} is not in the policy list {names}")

        repetitions = int(raw.get("repetitions", 1))
        if repetitions < 1:
            errors.append("repetitions must be >= 1")
        selection = raw.get("selection", "paragon")
        if selection not in ("naive", "paragon"):
            errors.append(f"selection must be naive or paragon, got {selection!r}")

        run_raw = raw.get("run", {}) or {}
        unknown = set(run_raw) - RUN_FIELDS
        if unknown:
            errors.append(f"run: unknown keys {sorted(unknown)}")
        initial_vms = run_raw.get("initial_vms", 0)
        if initial_vms != "auto":
            try:
                initial_vms = int(initial_vms)
            except (TypeError, ValueError):
                errors.append("run.initial_vms must be an integer or 'auto'")
                initial_vms = 0

        known_top = {"trace", "mix", "catalog", "rate_card", "policies", "baseline",
                     "output_dir", "seed", "repetitions", "vm_type", "selection",
                     "reference_rate_per_s", "run"}
        unknown = set(raw) - known_top
        if unknown:
            errors.append(f"unknown top-level keys {sorted(unknown)}")
        if "output_dir" not in raw:
            errors.append("output_dir is required")

        if errors:
            raise ValidationError(f"{path}: invalid experiment config:\n  - " + "\n  - ".join(errors))

        return cls(
            trace=trace,
            mix=mix,
            catalog_path=catalog_path,
            rate_card_path=rate_card_path,
            policies=policies,
            baseline=baseline,
            output_dir=resolve(str(raw["output_dir"])),
            seed=int(raw.get("seed", 0)),
            repetitions=repetitions,
            vm_type=str(raw.get("vm_type", "m4.large")),
            selection=selection,
            reference_rate_per_s=float(raw.get("reference_rate_per_s", 100.0)),
            initial_vms=initial_vms,
            max_vms=run_raw.get("max_vms"),
            keep_ledger=bool(run_raw.get("keep_ledger", False)),
            strict_priority=bool(run_raw.get("strict_priority", True)),
        )


def build_trace(spec: dict, seed: int) -> ArrivalTrace:
    """Materialize the trace section of a config (deterministic given seed)."""
    kind = spec["kind"]
    jitter = spec.get("jitter", "none")
    if kind == "constant":
        return gen_constant(float(spec["rate_per_s"]), float(spec["duration_s"]),
                            jitter=jitter, seed=seed if jitter != "none" else None)
    if kind == "burst":
        return gen_burst(int(spec["base_rate"]), int(spec["peak_rate"]),
                         int(spec["peak_start_s"]), int(spec["peak_len_s"]),
                         int(spec["duration_s"]), jitter=jitter,
                         seed=seed if jitter != "none" else None)
    if kind == "segments":
        rates: list[int] = []
        for seg in spec["segments"]:
            seconds = int(seg["seconds"])
            if seconds <= 0:
                raise ValidationError("segment seconds must be > 0")
            if "rate" in seg:
                rates.extend([int(seg["rate"])] * seconds)
            elif "from" in seg and "to" in seg:
                lo, hi = float(seg["from"]), float(seg["to"])
                for s in range(seconds):
                    frac = s / max(1, seconds - 1) if seconds > 1 else 1.0
                    rates.append(round(lo + (hi - lo) * frac))
            else:
                raise ValidationError("segment needs either 'rate' or 'from'/'to'")
        return gen_per_second_rates(rates, jitter=jitter,
                                    seed=seed if jitter != "none" else None)
    if kind == "file":
        return load_trace_csv(spec["path"])
    raise ValidationError(f"unknown trace kind {kind!r}")


@dataclass(frozen=True)
class ComparisonRow:
    policy: str
    normalized_cost: float
    slo_violation_pct: float
    over_provision_ratio: float
    serverless_share_pct: float
    normalized_cost_min: float | None = None
    normalized_cost_max: float | None = None


@dataclass(frozen=True)
class ComparisonTable:
    baseline: str
    rows: tuple[ComparisonRow, ...]

    def row(self, policy: str) -> ComparisonRow:
        for r in self.rows:
            if r.policy == policy:
                return r
        raise KeyError(policy)

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "rows": [
                {
                    "policy": r.policy,
                    "normalized_cost": r.normalized_cost,
                    "slo_violation_pct": r.slo_violation_pct,
                    "over_provision_ratio": r.over_provision_ratio,
                    "serverless_share_pct": r.serverless_share_pct,
                    "normalized_cost_min": r.normalized_cost_min,
                    "normalized_cost_max": r.normalized_cost_max,
                }
                for r in self.rows
            ],
        }


def compare(reports: Sequence[engine.MetricsReport], baseline_name: str) -> ComparisonTable:
    """Normalize one repetition's reports against the named baseline."""
    if not reports:
        raise ComparisonError("nothing to compare")
    by_kind = {}
    for r in reports:
        by_kind[r.policy["kind"]] = r
    if baseline_name not in by_kind:
        raise ComparisonError(f"baseline {baseline_name!r} not among reports {sorted(by_kind)}")
    baseline = by_kind[baseline_name]
    for r in reports:
        if r.trace_hash != baseline.trace_hash:
            raise ComparisonError(
                f"report for {r.policy['kind']!r} comes from a different trace than the baseline"
            )
    if baseline.total_cost <= 0:
        raise ComparisonError("baseline run has zero cost; nothing to normalize against")
    rows = []
    for r in reports:
        norm = float(r.total_cost / baseline.total_cost)
        share = (100.0 * r.serverless_invocations / r.requests_total) if r.requests_total else 0.0
        rows.append(ComparisonRow(
            policy=r.policy["kind"],
            normalized_cost=norm,
            slo_violation_pct=r.slo_violation_pct,
            over_provision_ratio=engine.over_provision_ratio(r, baseline),
            serverless_share_pct=share,
        ))
    return ComparisonTable(baseline=baseline_name, rows=tuple(rows))


def aggregate_tables(tables: Sequence[ComparisonTable]) -> ComparisonTable:
    """Mean over repetitions, recording the min/max of normalized cost."""
    if not tables:
        raise ComparisonError("no tables to aggregate")
    first = tables[0]
    rows = []
    for r in first.rows:
        series = [t.row(r.policy) for t in tables]
        costs = [s.normalized_cost for s in series]
        rows.append(ComparisonRow(
            policy=r.policy,
            normalized_cost=sum(costs) / len(costs),
            slo_violation_pct=sum(s.slo_violation_pct for s in series) / len(series),
            over_provision_ratio=sum(s.over_provision_ratio for s in series) / len(series),
            serverless_share_pct=sum(s.serverless_share_pct for s in series) / len(series),
            normalized_cost_min=min(costs),
            normalized_cost_max=max(costs),
        ))
    return ComparisonTable(baseline=first.baseline, rows=tuple(rows))


PLOT_HEADER = "policy,normalized_cost,slo_violation_pct,over_provision_ratio"


def emit_plot_data(table: ComparisonTable, style: str = "grouped_bar_with_line") -> str:
    """Plot-ready CSV for a cost-bars-plus-violations-line chart."""
    if style != "grouped_bar_with_line":
        raise ValidationError(f"unknown plot style {style!r}")
    if not table.rows:
        raise ValidationError("cannot emit plot data for an empty table")
    lines = [PLOT_HEADER]
    for r in table.rows:
        lines.append(f"{r.policy},{r.normalized_cost:.6f},{r.slo_violation_pct:.6f},{r.over_provision_ratio:.6f}")
    return "\n".join(lines) + "\n"


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    table: ComparisonTable
    report_paths: dict[str, list[Path]]
    table_path: Path
    plot_path: Path
    reports: dict[str, list[engine.MetricsReport]] = field(default_factory=dict)


def _partition_by_model(trace: ArrivalTrace, queries: list[QuerySpec]):
    """Split a workload into per-model slices (one engine run serves one model)."""
    groups: dict[str, list[QuerySpec]] = {}
    for q in queries:
        groups.setdefault(q.model_name, []).append(q)
    out = []
    for name in sorted(groups):
        qs = groups[name]
        sub_trace = ArrivalTrace(tuple(q.arrival_ms for q in qs), trace.duration_ms)
        out.append((name, sub_trace, qs))
    return out


def run_workload(
    trace: ArrivalTrace,
    queries: list[QuerySpec],
    policy: PolicySpec,
    card: RateCard,
    catalog: Sequence[ModelProfile],
    seed: int,
    *,
    vm_type: str,
    initial_vms: int | str = 0,
    max_vms: int | None = None,
    keep_ledger: bool = False,
    strict_priority: bool = True,
) -> engine.MetricsReport:
    """Run one policy over a (possibly multi-model) workload.

    Multi-model workloads are composed as parallel per-model runs whose
    reports merge into one; ``initial_vms='auto'`` pre-provisions each slice
    for its first-second arrival rate.
    """
    full_hash = engine.trace_fingerprint(trace, queries)
    parts = []
    hashes = []
    for name, sub_trace, sub_queries in _partition_by_model(trace, queries):
        if initial_vms == "auto":
            first_sec = sum(1 for t in sub_trace.arrivals_ms if t < 1000.0)
            model = next(m for m in catalog if m.name == name)
            slots = vm_capacity(vm_type, model, card)
            start_vms = required_vms(first_sec, model.ref_latency_ms, slots)
        else:
            start_vms = int(initial_vms)
        report = engine.run(
            sub_trace, sub_queries, policy, card, catalog, seed,
            vm_type=vm_type, initial_vms=start_vms, max_vms=max_vms,
            keep_ledger=keep_ledger, strict_priority=strict_priority,
        )
        parts.append(report)
        hashes.append(report.config_hash)
    config_hash = hashlib.sha256("|".join(hashes).encode()).hexdigest()
    return engine.merge_reports(parts, trace_hash=full_hash, config_hash=config_hash)


def _hash_stamp(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()[:10]


def _write_stamped(directory: Path, stem: str, suffix: str, content: bytes) -> Path:
    path = directory / f"{stem}_{_hash_stamp(content)}{suffix}"
    path.write_bytes(content)
    return path


def run_experiment(config_path: str | Path, echo=None) -> ExperimentResult:
    """Execute a full experiment config: all policies x repetitions.

    Repetition k derives its seeds as config seed + k, so jittered traces and
    Bernoulli mixes vary deterministically across repetitions.
    """
    cfg = ExperimentConfig.from_file(config_path)
    catalog = load_catalog(cfg.catalog_path)
    card = load_rate_card(cfg.rate_card_path)
    if cfg.vm_type not in card.vm_types:
        raise ValidationError(f"vm_type {cfg.vm_type!r} not present in the rate card")
    cost_fn = make_cost_fn(card, cfg.vm_type, cfg.reference_rate_per_s)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    tables = []
    report_paths: dict[str, list[Path]] = {p.kind: [] for p in cfg.policies}
    reports_by_kind: dict[str, list[engine.MetricsReport]] = {p.kind: [] for p in cfg.policies}
    for rep in range(cfg.repetitions):
        rep_seed = cfg.seed + rep
        trace = build_trace(cfg.trace, rep_seed)
        mix = MixSpec(
            strict_fraction=cfg.mix.strict_fraction,
            strict_slo_ms=cfg.mix.strict_slo_ms,
            relaxed_slo_ms=cfg.mix.relaxed_slo_ms,
            strict_accuracy_min_pct=cfg.mix.strict_accuracy_min_pct,
            relaxed_accuracy_min_pct=cfg.mix.relaxed_accuracy_min_pct,
            constraint_pool=cfg.mix.constraint_pool,
            rng_seed=rep_seed,
        )
        queries = assign_constraints(trace, mix, catalog, cfg.selection, cost_fn)
        rep_reports = []
        for policy in cfg.policies:
            report = run_workload(
                trace, queries, policy, card, catalog, rep_seed,
                vm_type=cfg.vm_type, initial_vms=cfg.initial_vms, max_vms=cfg.max_vms,
                keep_ledger=cfg.keep_ledger, strict_priority=cfg.strict_priority,
            )
            rep_reports.append(report)
            reports_by_kind[policy.kind].append(report)
            content = json.dumps(report.to_dict(), sort_keys=True, indent=1).encode()
            path = _write_stamped(cfg.output_dir, f"report_{policy.kind}_rep{rep:02d}", ".json", content)
            report_paths[policy.kind].append(path)
            if echo:
                echo(f"  {policy.kind} rep{rep}: cost={report.total_cost} "
                     f"violations={report.slo_violation_pct:.2f}% -> {path.name}")
        tables.append(compare(rep_reports, cfg.baseline))

    table = aggregate_tables(tables)
    table_bytes = json.dumps(table.to_dict(), sort_keys=True, indent=1).encode()
    table_path = _write_stamped(cfg.output_dir, "comparison", ".json", table_bytes)
    plot_path = _write_stamped(cfg.output_dir, "plotdata", ".csv", emit_plot_data(table).encode())
    return ExperimentResult(
        config=cfg,
        table=table,
        report_paths=report_paths,
        table_path=table_path,
        plot_path=plot_path,
        reports=reports_by_kind,
    )


def load_report(path: str | Path) -> engine.MetricsReport:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read report {path}: {exc}") from exc
    return engine.MetricsReport.from_dict(data)
