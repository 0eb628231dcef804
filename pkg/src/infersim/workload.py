"""Arrival traces, burstiness analysis and per-query constraint assignment.

Generators are pure functions of their parameters and seed: reruns are
byte-identical.  Jitter is always opt-in; the default shapes are deterministic
so hand-traced fixtures stay stable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

from .catalog import (
    ConstraintSet,
    ModelProfile,
    select_model_naive,
    select_model_paragon,
)
from .errors import TraceParseError, ValidationError

STRICT = "strict"
RELAXED = "relaxed"


@dataclass(frozen=True)
class ArrivalTrace:
    """Sorted arrival timestamps (ms since trace start) over a fixed horizon."""

    arrivals_ms: tuple[float, ...]
    duration_ms: float

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValidationError("trace duration must be > 0")
        prev = 0.0
        for t in self.arrivals_ms:
            if t < prev:
                raise ValidationError("arrival timestamps must be non-decreasing")
            prev = t
        if self.arrivals_ms:
            if self.arrivals_ms[0] < 0:
                raise ValidationError("arrival timestamps must be >= 0")
            if self.arrivals_ms[-1] >= self.duration_ms:
                raise ValidationError("arrival timestamps must fall inside [0, duration)")

    def __len__(self) -> int:
        return len(self.arrivals_ms)


def load_trace_csv(path: str | Path) -> ArrivalTrace:
    """Read a trace file in either accepted shape.

    (a) headerless, one arrival timestamp in ms per line;
    (b) header ``sec,count`` followed by per-second rates, expanded to evenly
        spaced arrivals within each second.

    The horizon for timestamp files is the last arrival + 1 ms, rounded up to
    a whole second.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ValidationError(f"cannot read trace {path}: {exc}") from exc
    rows = [(i + 1, line.strip()) for i, line in enumerate(lines) if line.strip()]
    if not rows:
        raise ValidationError(f"{path}: trace file is empty")

    if rows[0][1].lower().replace(" ", "") == "sec,count":
        arrivals: list[float] = []
        seen: set[int] = set()
        max_sec = -1
        for line_no, line in rows[1:]:
            parts = line.split(",")
            if len(parts) != 2:
                raise TraceParseError(path, line_no, f"expected 'sec,count', got {line!r}")
            try:
                sec = int(parts[0])
                count = int(parts[1])
            except ValueError:
                raise TraceParseError(path, line_no, f"non-integer rate row {line!r}") from None
            if sec < 0:
                raise ValidationError(f"{path}:{line_no}: negative second index")
            if count < 0:
                raise ValidationError(f"{path}:{line_no}: negative count")
            if sec in seen:
                raise ValidationError(f"{path}:{line_no}: duplicate second index {sec}")
            seen.add(sec)
            max_sec = max(max_sec, sec)
            arrivals.extend(sec * 1000.0 + k * 1000.0 / count for k in range(count))
        if max_sec < 0:
            raise ValidationError(f"{path}: rate-format trace has no data rows")
        arrivals.sort()
        return ArrivalTrace(tuple(arrivals), duration_ms=(max_sec + 1) * 1000.0)

    timestamps: list[float] = []
    for line_no, line in rows:
        try:
            t = float(line)
        except ValueError:
            raise TraceParseError(path, line_no, f"not a timestamp: {line!r}") from None
        if t < 0:
            raise ValidationError(f"{path}:{line_no}: negative timestamp {t}")
        timestamps.append(t)
    timestamps.sort()
    duration = ceil((timestamps[-1] + 1.0) / 1000.0) * 1000.0
    return ArrivalTrace(tuple(timestamps), duration_ms=duration)


def _second_grid(rate: int, second: int) -> list[float]:
    base = second * 1000.0
    return [base + k * 1000.0 / rate for k in range(rate)]


def _from_per_second_rates(rates: Sequence[int], jitter: str, seed: int | None) -> tuple[float, ...]:
    arrivals: list[float] = []
    if jitter == "none":
        offsets: dict[int, list[float]] = {}
        extend = arrivals.extend
        for sec, rate in enumerate(rates):
            if rate > 0:
                off = offsets.get(rate)
                if off is None:
                    off = offsets[rate] = [k * 1000.0 / rate for k in range(rate)]
                base = sec * 1000.0
                extend([base + o for o in off])
    elif jitter == "poisson":
        if seed is None:
            raise ValidationError("poisson jitter requires a seed")
        rng = random.Random(seed)
        for sec, rate in enumerate(rates):
            if rate <= 0:
                continue
            t = sec * 1000.0 + rng.expovariate(rate) * 1000.0
            while t < (sec + 1) * 1000.0:
                arrivals.append(t)
                t += rng.expovariate(rate) * 1000.0
    else:
        raise ValidationError(f"unknown jitter mode {jitter!r}")
    return tuple(arrivals)


def gen_constant(rate_per_s: float, duration_s: float, jitter: str = "none",
                 seed: int | None = None) -> ArrivalTrace:
    """Constant-rate trace: even spacing, or seeded exponential inter-arrivals."""
    if rate_per_s <= 0:
        raise ValidationError("rate_per_s must be > 0")
    if duration_s <= 0:
        raise ValidationError("duration_s must be > 0")
    duration_ms = duration_s * 1000.0
    if jitter == "none":
        if float(rate_per_s).is_integer() and float(duration_s).is_integer():
            # phase-locked per-second grid: keeps composite generators exact
            arrivals = _from_per_second_rates([int(rate_per_s)] * int(duration_s), "none", None)
        else:
            spacing = 1000.0 / rate_per_s
            n = ceil(duration_ms / spacing)
            arrivals = tuple(t for t in (k * spacing for k in range(n)) if t < duration_ms)
        return ArrivalTrace(arrivals, duration_ms)
    if jitter == "poisson":
        if seed is None:
            raise ValidationError("poisson jitter requires a seed")
        rng = random.Random(seed)
        out: list[float] = []
        t = rng.expovariate(rate_per_s) * 1000.0
        while t < duration_ms:
            out.append(t)
            t += rng.expovariate(rate_per_s) * 1000.0
        return ArrivalTrace(tuple(out), duration_ms)
    raise ValidationError(f"unknown jitter mode {jitter!r}")


def gen_burst(base_rate: int, peak_rate: int, peak_start_s: int, peak_len_s: int,
              duration_s: int, jitter: str = "none", seed: int | None = None) -> ArrivalTrace:
    """Constant base rate with one rectangular peak window.

    Rates are integers per second so the degenerate case peak == base is
    exactly ``gen_constant``.
    """
    for name, value in (("base_rate", base_rate), ("peak_rate", peak_rate),
                        ("peak_start_s", peak_start_s), ("peak_len_s", peak_len_s),
                        ("duration_s", duration_s)):
        if int(value) != value:
            raise ValidationError(f"{name} must be an integer")
    if base_rate < 0 or peak_rate < 1:
        raise ValidationError("rates must be non-negative with peak_rate >= 1")
    if peak_rate < base_rate:
        raise ValidationError("peak_rate must be >= base_rate")
    if duration_s <= 0:
        raise ValidationError("duration_s must be > 0")
    if peak_start_s < 0 or peak_len_s < 0 or peak_start_s + peak_len_s > duration_s:
        raise ValidationError("peak window must fall inside the trace horizon")
    rates = [
        peak_rate if peak_start_s <= sec < peak_start_s + peak_len_s else base_rate
        for sec in range(int(duration_s))
    ]
    return gen_per_second_rates(rates, jitter=jitter, seed=seed)


def gen_per_second_rates(rates: Sequence[int], jitter: str = "none",
                         seed: int | None = None) -> ArrivalTrace:
    """Trace from an explicit per-second rate profile (composite shapes)."""
    if not rates:
        raise ValidationError("rates must be non-empty")
    if any(r < 0 for r in rates):
        raise ValidationError("per-second rates must be >= 0")
    arrivals = _from_per_second_rates([int(r) for r in rates], jitter, seed)
    return ArrivalTrace(arrivals, duration_ms=len(rates) * 1000.0)


# --- Burstiness ------------------------------------------------------------


def bucket_counts(trace: ArrivalTrace, window_s: float = 1.0) -> list[int]:
    """Arrivals per window over the full horizon, including empty windows."""
    if window_s <= 0:
        raise ValidationError("window_s must be > 0")
    window_ms = window_s * 1000.0
    n_bins = ceil(trace.duration_ms / window_ms)
    counts = [0] * n_bins
    for t in trace.arrivals_ms:
        counts[int(t // window_ms)] += 1
    return counts


def _median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    mid = n // 2
    if n % 2:
        return float(ordered[mid])
    return (ordered[mid - 1] + ordered[mid]) / 2.0


def peak_to_median_from_counts(counts: Sequence[int]) -> float:
    if not counts:
        return 0.0
    peak = max(counts)
    if peak == 0:
        return 0.0
    return 100.0 * (peak - _median(counts)) / peak


def peak_to_median(trace: ArrivalTrace, window_s: float = 1.0) -> float:
    """100 * (peak - median) / peak of windowed arrival rates; 0 when peak is 0."""
    if not trace.arrivals_ms:
        raise ValidationError("peak_to_median needs a non-empty trace")
    return peak_to_median_from_counts(bucket_counts(trace, window_s))


# --- Query constraints -----------------------------------------------------


class QuerySpec(NamedTuple):
    id: int
    arrival_ms: float
    slo_class: str
    constraints: ConstraintSet
    model_name: str


@dataclass(frozen=True)
class MixSpec:
    """How queries get classes, constraints and seeds.

    The default two-class mix models a strict/relaxed SLO split.  Supplying
    ``constraint_pool`` switches to per-query constraint triples drawn
    uniformly from the pool (each query can demand its own accuracy, latency
    and cost); a pool entry is strict when its latency bound is within
    ``strict_slo_ms``.
    """

    strict_fraction: float = 0.5
    strict_slo_ms: float = 500.0
    relaxed_slo_ms: float = 5000.0
    strict_accuracy_min_pct: float = 70.0
    relaxed_accuracy_min_pct: float = 70.0
    constraint_pool: tuple[ConstraintSet, ...] | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strict_fraction <= 1.0:
            raise ValidationError("strict_fraction must be within [0, 1]")
        if self.strict_slo_ms >= self.relaxed_slo_ms:
            raise ValidationError("strict_slo_ms must be below relaxed_slo_ms")
        if self.constraint_pool is not None and not self.constraint_pool:
            raise ValidationError("constraint_pool must be non-empty when given")

    def strict_template(self) -> ConstraintSet:
        return ConstraintSet(accuracy_min_pct=self.strict_accuracy_min_pct,
                             latency_max_ms=self.strict_slo_ms)

    def relaxed_template(self) -> ConstraintSet:
        return ConstraintSet(accuracy_min_pct=self.relaxed_accuracy_min_pct,
                             latency_max_ms=self.relaxed_slo_ms)

    def templates(self) -> list[tuple[str, ConstraintSet]]:
        if self.constraint_pool is not None:
            out = []
            for c in self.constraint_pool:
                cls = STRICT if (c.latency_max_ms is not None and c.latency_max_ms <= self.strict_slo_ms) else RELAXED
                out.append((cls, c))
            return out
        return [(STRICT, self.strict_template()), (RELAXED, self.relaxed_template())]


def assign_constraints(
    trace: ArrivalTrace,
    mix: MixSpec,
    catalog: Sequence[ModelProfile],
    selection_mode: str = "paragon",
    cost_fn: Callable[[ModelProfile, ConstraintSet], object] | None = None,
) -> list[QuerySpec]:
    """Attach a class, constraints and a selected model to every arrival.

    Model selection runs once per constraint template; a template with no
    feasible model fails the build here rather than query by query.
    ``cost_fn(model, constraints)`` prices a model under a template's latency
    budget (required for paragon selection).
    """
    if selection_mode not in ("naive", "paragon"):
        raise ValidationError(f"unknown selection mode {selection_mode!r}")
    if selection_mode == "paragon" and cost_fn is None:
        raise ValidationError("paragon selection requires a cost_fn")
    templates = mix.templates()
    chosen: list[tuple[str, ConstraintSet, str]] = []
    for cls, constraints in templates:
        bound = (lambda m, c=constraints: cost_fn(m, c)) if cost_fn is not None else None
        if selection_mode == "paragon":
            choice = select_model_paragon(catalog, constraints, bound)
            if choice.model_name is None:
                raise ValidationError(
                    f"no model satisfies template ({constraints.describe()}); fix the catalog or the mix"
                )
        else:
            choice = select_model_naive(catalog, constraints, bound)
        chosen.append((cls, constraints, choice.model_name))

    rng = random.Random(mix.rng_seed)
    queries: list[QuerySpec] = []
    if mix.constraint_pool is not None:
        n = len(chosen)
        for i, t in enumerate(trace.arrivals_ms):
            cls, constraints, model_name = chosen[rng.randrange(n)]
            queries.append(QuerySpec(i, t, cls, constraints, model_name))
    else:
        strict_cls, strict_c, strict_model = chosen[0]
        relaxed_cls, relaxed_c, relaxed_model = chosen[1]
        frac = mix.strict_fraction
        if frac in (0.0, 1.0):
            # degenerate mix: the Bernoulli draw cannot change anything
            cls, constraints, model_name = chosen[0] if frac == 1.0 else chosen[1]
            return [QuerySpec(i, t, cls, constraints, model_name)
                    for i, t in enumerate(trace.arrivals_ms)]
        for i, t in enumerate(trace.arrivals_ms):
            if rng.random() < frac:
                queries.append(QuerySpec(i, t, strict_cls, strict_c, strict_model))
            else:
                queries.append(QuerySpec(i, t, relaxed_cls, relaxed_c, relaxed_model))
    return queries
