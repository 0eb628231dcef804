"""Model profiles and constraint-driven model selection.

A catalog is a list of :class:`ModelProfile` entries describing offline-profiled
inference models (accuracy, reference latency, memory need, per-VM slot counts
and serverless latency tables).  Selection picks a model for a query class:
either the cheapest feasible one (``select_model_paragon``) or the globally
most accurate one regardless of constraints (``select_model_naive``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .errors import ConfigurationError, ValidationError

CATALOG_KEYS = {
    "name",
    "accuracy_pct",
    "ref_latency_ms",
    "memory_mb",
    "vm_slots",
    "serverless_latency_ms",
}


@dataclass(frozen=True)
class ModelProfile:
    """One profiled inference model.

    ``vm_slots`` maps a VM type name to the number of queries one such VM can
    serve concurrently without exceeding ``ref_latency_ms``.
    ``serverless_latency_ms`` maps a function memory size (MB) to execution
    latency; it is only defined for memory >= ``memory_mb`` and latency never
    increases with more memory.
    """

    name: str
    accuracy_pct: float
    ref_latency_ms: float
    memory_mb: float
    vm_slots: Mapping[str, int]
    serverless_latency_ms: Mapping[int, float]

    def __post_init__(self):
        if not self.name:
            raise ValidationError("model name must be non-empty")
        if not 0 < self.accuracy_pct <= 100:
            raise ValidationError(f"{self.name}: accuracy_pct must be in (0, 100], got {self.accuracy_pct}")
        if self.ref_latency_ms <= 0:
            raise ValidationError(f"{self.name}: ref_latency_ms must be > 0")
        if self.memory_mb <= 0:
            raise ValidationError(f"{self.name}: memory_mb must be > 0")
        for vm_type, slots in self.vm_slots.items():
            if not isinstance(slots, int) or slots < 1:
                raise ValidationError(f"{self.name}: vm_slots[{vm_type!r}] must be a positive integer")
        prev_latency = None
        for mem in sorted(self.serverless_latency_ms):
            latency = self.serverless_latency_ms[mem]
            if mem < self.memory_mb:
                raise ValidationError(
                    f"{self.name}: serverless latency defined at {mem} MB below the model's "
                    f"{self.memory_mb} MB requirement"
                )
            if latency <= 0:
                raise ValidationError(f"{self.name}: serverless latency at {mem} MB must be > 0")
            if prev_latency is not None and latency > prev_latency:
                raise ValidationError(
                    f"{self.name}: serverless latency must be non-increasing with memory "
                    f"({mem} MB -> {latency} ms)"
                )
            prev_latency = latency

    def serverless_memories(self) -> list[int]:
        return sorted(self.serverless_latency_ms)


@dataclass(frozen=True)
class ConstraintSet:
    """Per-query (or per-class) requirements.

    At least two of the three fields must be present; selection optimizes the
    remaining one.  ``cost_budget_per_1m`` is in currency units per million
    queries.
    """

    accuracy_min_pct: float | None = None
    latency_max_ms: float | None = None
    cost_budget_per_1m: float | None = None

    def __post_init__(self):
        present = sum(v is not None for v in (self.accuracy_min_pct, self.latency_max_ms, self.cost_budget_per_1m))
        if present < 2:
            raise ValidationError("a constraint set needs at least two of accuracy/latency/cost")
        if self.accuracy_min_pct is not None and not 0 <= self.accuracy_min_pct <= 100:
            raise ValidationError("accuracy_min_pct must be within [0, 100]")
        if self.latency_max_ms is not None and self.latency_max_ms <= 0:
            raise ValidationError("latency_max_ms must be > 0")
        if self.cost_budget_per_1m is not None and self.cost_budget_per_1m < 0:
            raise ValidationError("cost_budget_per_1m must be >= 0")

    def describe(self) -> str:
        parts = []
        if self.accuracy_min_pct is not None:
            parts.append(f"acc>={self.accuracy_min_pct}")
        if self.latency_max_ms is not None:
            parts.append(f"lat<={self.latency_max_ms}ms")
        if self.cost_budget_per_1m is not None:
            parts.append(f"cost<={self.cost_budget_per_1m}/1M")
        return ", ".join(parts)


@dataclass(frozen=True)
class ModelChoice:
    """Outcome of a selection: which model, where it should run, what it costs."""

    model_name: str | None
    deployment_hint: str = "either"  # vm | serverless | either
    estimated_cost_per_1m: Decimal | None = None
    satisfied: bool = False


CostFn = Callable[[ModelProfile], Decimal]


def _meets(model: ModelProfile, c: ConstraintSet, cost: Decimal | None) -> bool:
    if c.accuracy_min_pct is not None and model.accuracy_pct < c.accuracy_min_pct:
        return False
    if c.latency_max_ms is not None and model.ref_latency_ms > c.latency_max_ms:
        return False
    if c.cost_budget_per_1m is not None:
        if cost is None or cost > Decimal(str(c.cost_budget_per_1m)):
            return False
    return True


def feasible_models(catalog: Sequence[ModelProfile], c: ConstraintSet) -> list[ModelProfile]:
    """Profiles meeting the accuracy and latency bounds, in catalog order.

    Cost is not checked here: it depends on the deployment and is the job of
    the cost-aware selection below.
    """
    if not catalog:
        raise ConfigurationError("empty model catalog")
    out = []
    for m in catalog:
        if c.accuracy_min_pct is not None and m.accuracy_pct < c.accuracy_min_pct:
            continue
        if c.latency_max_ms is not None and m.ref_latency_ms > c.latency_max_ms:
            continue
        out.append(m)
    return out


def select_model_paragon(
    catalog: Sequence[ModelProfile],
    c: ConstraintSet,
    cost_fn: CostFn,
    hint_fn: Callable[[ModelProfile], str] | None = None,
) -> ModelChoice:
    """Cheapest feasible model for the given accuracy + latency constraints.

    Ties break on lower reference latency, then lexicographic name, so repeat
    runs always pick the same model.
    """
    if not catalog:
        raise ConfigurationError("empty model catalog")
    if c.accuracy_min_pct is None or c.latency_max_ms is None:
        raise ValidationError("paragon selection needs both accuracy_min_pct and latency_max_ms")
    candidates = feasible_models(catalog, c)
    if not candidates:
        return ModelChoice(model_name=None, satisfied=False)
    best = min(candidates, key=lambda m: (cost_fn(m), m.ref_latency_ms, m.name))
    cost = Decimal(cost_fn(best))
    return ModelChoice(
        model_name=best.name,
        deployment_hint=hint_fn(best) if hint_fn else "either",
        estimated_cost_per_1m=cost,
        satisfied=_meets(best, c, cost),
    )


def select_model_naive(
    catalog: Sequence[ModelProfile],
    c: ConstraintSet,
    cost_fn: CostFn | None = None,
) -> ModelChoice:
    """Constraint-oblivious baseline: the most accurate model in the catalog.

    ``satisfied`` reports whether that model happens to meet the constraints
    (the cost bound is only checked when a cost_fn is supplied).
    """
    if not catalog:
        raise ConfigurationError("empty model catalog")
    best = min(catalog, key=lambda m: (-m.accuracy_pct, m.name))
    cost = Decimal(cost_fn(best)) if cost_fn is not None else None
    return ModelChoice(
        model_name=best.name,
        deployment_hint="either",
        estimated_cost_per_1m=cost,
        satisfied=_meets(best, c, cost),
    )


def catalog_by_name(catalog: Sequence[ModelProfile]) -> dict[str, ModelProfile]:
    return {m.name: m for m in catalog}


def load_catalog(path: str | Path) -> list[ModelProfile]:
    """Load a JSON catalog file: a top-level list of model objects.

    Keys must be exactly the ModelProfile field names; unknown keys are
    rejected to catch typos early.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read catalog {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise ValidationError(f"{path}: catalog must be a non-empty JSON list")
    models = []
    seen = set()
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ValidationError(f"{path}: entry {i} is not an object")
        keys = set(entry)
        if keys != CATALOG_KEYS:
            unknown = keys - CATALOG_KEYS
            missing = CATALOG_KEYS - keys
            problems = []
            if unknown:
                problems.append(f"unknown keys {sorted(unknown)}")
            if missing:
                problems.append(f"missing keys {sorted(missing)}")
            raise ValidationError(f"{path}: entry {i}: " + "; ".join(problems))
        try:
            serverless = {int(k): float(v) for k, v in entry["serverless_latency_ms"].items()}
            vm_slots = {str(k): int(v) for k, v in entry["vm_slots"].items()}
            model = ModelProfile(
                name=str(entry["name"]),
                accuracy_pct=float(entry["accuracy_pct"]),
                ref_latency_ms=float(entry["ref_latency_ms"]),
                memory_mb=float(entry["memory_mb"]),
                vm_slots=vm_slots,
                serverless_latency_ms=serverless,
            )
        except (TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"{path}: entry {i}: {exc}") from exc
        if model.name in seen:
            raise ValidationError(f"{path}: duplicate model name {model.name!r}")
        seen.add(model.name)
        models.append(model)
    return models
