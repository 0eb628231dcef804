"""Capacity and billing semantics for VMs and serverless functions.

All currency arithmetic is done in :class:`decimal.Decimal` quantized to 12
fractional digits, so per-item costs are exact and totals do not depend on
summation order.  The rate card is data, never baked-in: the simulator refuses
to run without one.
"""

from __future__ import annotations

import json
from bisect import bisect_right, insort
from dataclasses import dataclass, field
from decimal import Decimal
from math import ceil
from pathlib import Path
from typing import Mapping, Sequence

from .catalog import ModelProfile
from .errors import ConfigurationError, InfeasibleError, ValidationError

MONEY_EXP = Decimal("1E-12")
ZERO_MONEY = Decimal(0).quantize(MONEY_EXP)


def as_money(value) -> Decimal:
    """Coerce to an exact 12-fractional-digit Decimal."""
    if isinstance(value, Decimal):
        d = value
    elif isinstance(value, float):
        d = Decimal(str(value))
    else:
        d = Decimal(value)
    return d.quantize(MONEY_EXP)


@dataclass(frozen=True)
class VmTypeSpec:
    hourly_price: Decimal
    provision_delay_s: float
    compute_units: float

    def __post_init__(self):
        if self.hourly_price < 0:
            raise ValidationError("hourly_price must be >= 0")
        if self.provision_delay_s < 0:
            raise ValidationError("provision_delay_s must be >= 0")
        if self.compute_units <= 0:
            raise ValidationError("compute_units must be > 0")


@dataclass(frozen=True)
class ServerlessSpec:
    per_invocation_fee: Decimal
    gb_second_rate: Decimal
    billing_quantum_ms: float
    memory_tiers_mb: tuple[int, ...]
    tier_speed_factors: tuple[float, ...]
    cold_start_ms: float = 1000.0
    model_load_ms: float = 2000.0
    keep_alive_s: float = 600.0

    def __post_init__(self):
        if self.per_invocation_fee < 0 or self.gb_second_rate < 0:
            raise ValidationError("serverless prices must be >= 0")
        if self.billing_quantum_ms <= 0:
            raise ValidationError("billing_quantum_ms must be > 0")
        if self.cold_start_ms < 0 or self.model_load_ms < 0 or self.keep_alive_s < 0:
            raise ValidationError("serverless timing constants must be >= 0")
        if len(self.memory_tiers_mb) != len(self.tier_speed_factors):
            raise ValidationError("memory_tiers_mb and tier_speed_factors must have the same length")
        if not self.memory_tiers_mb:
            raise ValidationError("at least one serverless memory tier is required")
        if list(self.memory_tiers_mb) != sorted(set(self.memory_tiers_mb)):
            raise ValidationError("memory_tiers_mb must be strictly ascending")
        prev = None
        for f in self.tier_speed_factors:
            if f < 1.0:
                raise ValidationError("tier speed factors are slowdowns relative to the fastest tier, so >= 1")
            if prev is not None and f > prev:
                raise ValidationError("tier speed factors must be non-increasing with memory")
            prev = f


@dataclass(frozen=True)
class RateCard:
    vm_types: Mapping[str, VmTypeSpec]
    serverless: ServerlessSpec
    billing_granularity_s: float = 1.0

    def __post_init__(self):
        if not self.vm_types:
            raise ValidationError("rate card needs at least one VM type")
        if self.billing_granularity_s <= 0:
            raise ValidationError("billing_granularity_s must be > 0")

    def vm(self, vm_type: str) -> VmTypeSpec:
        try:
            return self.vm_types[vm_type]
        except KeyError:
            raise ConfigurationError(f"unknown vm type {vm_type!r}") from None

    def to_dict(self) -> dict:
        return {
            "vm_types": {
                name: {
                    "hourly_price": str(spec.hourly_price),
                    "provision_delay_s": spec.provision_delay_s,
                    "compute_units": spec.compute_units,
                }
                for name, spec in sorted(self.vm_types.items())
            },
            "serverless": {
                "per_invocation_fee": str(self.serverless.per_invocation_fee),
                "gb_second_rate": str(self.serverless.gb_second_rate),
                "billing_quantum_ms": self.serverless.billing_quantum_ms,
                "cold_start_ms": self.serverless.cold_start_ms,
                "model_load_ms": self.serverless.model_load_ms,
                "keep_alive_s": self.serverless.keep_alive_s,
                "memory_tiers_mb": list(self.serverless.memory_tiers_mb),
                "tier_speed_factors": list(self.serverless.tier_speed_factors),
            },
            "billing_granularity_s": self.billing_granularity_s,
        }

    @classmethod
    def from_dict(cls, data: dict, source: str = "<rate card>") -> "RateCard":
        top_required = {"vm_types", "serverless"}
        top_allowed = top_required | {"billing_granularity_s"}
        _check_keys(data, top_required, top_allowed, source)
        vm_types = {}
        if not isinstance(data["vm_types"], dict) or not data["vm_types"]:
            raise ValidationError(f"{source}: vm_types must be a non-empty object")
        for name, raw in data["vm_types"].items():
            vm_required = {"hourly_price", "provision_delay_s", "compute_units"}
            _check_keys(raw, vm_required, vm_required, f"{source}: vm_types[{name!r}]")
            vm_types[name] = VmTypeSpec(
                hourly_price=as_money(raw["hourly_price"]),
                provision_delay_s=float(raw["provision_delay_s"]),
                compute_units=float(raw["compute_units"]),
            )
        sl = data["serverless"]
        sl_required = {
            "per_invocation_fee",
            "gb_second_rate",
            "billing_quantum_ms",
            "memory_tiers_mb",
            "tier_speed_factors",
        }
        sl_allowed = sl_required | {"cold_start_ms", "model_load_ms", "keep_alive_s"}
        _check_keys(sl, sl_required, sl_allowed, f"{source}: serverless")
        serverless = ServerlessSpec(
            per_invocation_fee=as_money(sl["per_invocation_fee"]),
            gb_second_rate=as_money(sl["gb_second_rate"]),
            billing_quantum_ms=float(sl["billing_quantum_ms"]),
            memory_tiers_mb=tuple(int(m) for m in sl["memory_tiers_mb"]),
            tier_speed_factors=tuple(float(f) for f in sl["tier_speed_factors"]),
            cold_start_ms=float(sl.get("cold_start_ms", 1000.0)),
            model_load_ms=float(sl.get("model_load_ms", 2000.0)),
            keep_alive_s=float(sl.get("keep_alive_s", 600.0)),
        )
        return cls(
            vm_types=vm_types,
            serverless=serverless,
            billing_granularity_s=float(data.get("billing_granularity_s", 1.0)),
        )


def _check_keys(data, required: set, allowed: set, source: str) -> None:
    if not isinstance(data, dict):
        raise ValidationError(f"{source}: expected an object")
    keys = set(data)
    unknown = keys - allowed
    missing = required - keys
    problems = []
    if unknown:
        problems.append(f"unknown keys {sorted(unknown)}")
    if missing:
        problems.append(f"missing keys {sorted(missing)}")
    if problems:
        raise ValidationError(f"{source}: " + "; ".join(problems))


def load_rate_card(path: str | Path) -> RateCard:
    """Load a JSON rate card; money literals are parsed straight into Decimal."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(), parse_float=Decimal)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read rate card {path}: {exc}") from exc
    return RateCard.from_dict(raw, source=str(path))


# --- VM capacity and cost -------------------------------------------------


def vm_capacity(
    vm_type: str,
    model: ModelProfile,
    card: RateCard,
    reference_vm_type: str | None = None,
) -> int:
    """Concurrent queries one VM of ``vm_type`` serves for ``model``.

    Uses the profiled slot table directly when present; otherwise scales the
    reference VM's slot count linearly with compute units (pricing and
    capacity both scale linearly with VM size), floored and clamped to 1.
    """
    spec = card.vm(vm_type)
    if vm_type in model.vm_slots:
        return model.vm_slots[vm_type]
    if reference_vm_type is None:
        if len(model.vm_slots) == 1:
            reference_vm_type = next(iter(model.vm_slots))
        else:
            raise ConfigurationError(
                f"model {model.name!r} has no slot entry for {vm_type!r} and no single "
                "reference type; pass reference_vm_type explicitly"
            )
    if reference_vm_type not in model.vm_slots:
        raise ConfigurationError(
            f"model {model.name!r} has no slot entry for reference type {reference_vm_type!r}"
        )
    ref_spec = card.vm(reference_vm_type)
    scaled = model.vm_slots[reference_vm_type] * spec.compute_units / ref_spec.compute_units
    return max(1, int(scaled))


def vm_cost(billed_seconds: float, vm_type: str, card: RateCard) -> Decimal:
    """Cost of one VM billed for ``billed_seconds``, rounded up to the billing increment."""
    if billed_seconds < 0:
        raise ValidationError("billed_seconds must be >= 0")
    if billed_seconds == 0:
        return ZERO_MONEY
    gran = card.billing_granularity_s
    units = ceil(billed_seconds / gran)
    spec = card.vm(vm_type)
    cost = Decimal(units) * Decimal(str(gran)) * spec.hourly_price / Decimal(3600)
    return cost.quantize(MONEY_EXP)


# --- Serverless latency, cost and configuration ----------------------------


def serverless_exec_latency(model: ModelProfile, memory_mb: float, card: RateCard) -> float:
    """Execution latency of ``model`` in a function with ``memory_mb``.

    Profiled latency tables win: exact entry if present, otherwise the entry at
    the largest profiled memory <= the allocation (so latency saturates past
    the model's last profiled point).  Models without table coverage fall back
    to the card's tier speed factors applied to the reference VM latency.
    """
    if memory_mb < model.memory_mb:
        raise InfeasibleError(
            f"{model.name}: {memory_mb} MB is below the model's {model.memory_mb} MB requirement"
        )
    table = model.serverless_latency_ms
    if table:
        keys = model.serverless_memories()
        idx = bisect_right(keys, memory_mb) - 1
        if idx >= 0:
            return table[keys[idx]]
    tiers = card.serverless.memory_tiers_mb
    factors = card.serverless.tier_speed_factors
    idx = bisect_right(tiers, memory_mb) - 1
    if idx < 0:
        idx = 0  # below the smallest tier: charged/behaving like the slowest tier
    return model.ref_latency_ms * factors[idx]


def serverless_invocation_cost(exec_ms: float, memory_mb: float, card: RateCard) -> Decimal:
    """Per-invocation fee + GB-seconds charge, duration rounded up to the quantum."""
    if exec_ms <= 0:
        raise ValidationError("exec_ms must be > 0")
    sl = card.serverless
    units = ceil(exec_ms / sl.billing_quantum_ms)
    billed_seconds = Decimal(units) * Decimal(str(sl.billing_quantum_ms)) / Decimal(1000)
    gb = Decimal(str(memory_mb)) / Decimal(1024)
    cost = sl.per_invocation_fee + billed_seconds * gb * sl.gb_second_rate
    return cost.quantize(MONEY_EXP)


def serverless_options(model: ModelProfile, card: RateCard) -> list[tuple[int, float]]:
    """All configurable (memory, exec latency) pairs for the model, ascending by memory."""
    sizes = set(model.serverless_memories())
    sizes.update(t for t in card.serverless.memory_tiers_mb if t >= model.memory_mb)
    out = []
    for mem in sorted(sizes):
        out.append((mem, serverless_exec_latency(model, mem, card)))
    return out


def choose_serverless_memory(
    model: ModelProfile,
    latency_budget_ms: float | None,
    card: RateCard,
    include_model_load: bool = False,
) -> int:
    """Smallest configured memory whose execution latency fits the budget.

    Smallest-feasible is cheapest: cost never decreases with memory at a fixed
    billed duration while latency never increases.  ``include_model_load``
    accounts for the cold-path model fetch when sizing against the budget.
    """
    if latency_budget_ms is not None and latency_budget_ms <= 0:
        raise InfeasibleError("latency budget already exhausted", fastest_ms=None)
    options = serverless_options(model, card)
    if not options:
        raise InfeasibleError(f"{model.name}: no serverless memory size can host the model")
    overhead = card.serverless.model_load_ms if include_model_load else 0.0
    fastest = None
    for mem, exec_ms in options:
        total = exec_ms + overhead
        fastest = total if fastest is None else min(fastest, total)
        if latency_budget_ms is None or total <= latency_budget_ms:
            return mem
    raise InfeasibleError(
        f"{model.name}: fastest serverless path {fastest:.1f} ms exceeds budget "
        f"{latency_budget_ms:.1f} ms",
        fastest_ms=fastest,
    )


# --- Warm pool -------------------------------------------------------------


@dataclass
class DispatchOutcome:
    latency_ms: float
    cost: Decimal
    cold: bool
    billed_ms: float


class ServerlessPool:
    """Warm-container bookkeeping for one function memory size.

    ``warm`` holds container finish timestamps, kept sorted.  Entries in the
    future are containers still running; past entries within keep_alive are
    warm and each serves one invocation at a time.
    """

    __slots__ = ("memory_mb", "warm", "invocations", "cold_starts",
                 "billed_counts", "_cost_cache")

    def __init__(self, memory_mb: int):
        self.memory_mb = memory_mb
        self.warm: list[float] = []
        self.invocations = 0
        self.cold_starts = 0
        self.billed_counts: dict[float, int] = {}
        self._cost_cache: dict[float, Decimal] = {}

    def in_flight(self, now_ms: float) -> int:
        return len(self.warm) - bisect_right(self.warm, now_ms)

    def warm_count(self, now_ms: float, card: RateCard) -> int:
        cutoff = now_ms - card.serverless.keep_alive_s * 1000.0
        lo = bisect_right(self.warm, cutoff)
        hi = bisect_right(self.warm, now_ms)
        return max(0, hi - lo)

    def billed_gb_seconds(self, card: RateCard) -> Decimal:
        quantum = Decimal(str(card.serverless.billing_quantum_ms))
        total = Decimal(0)
        for billed_ms, count in self.billed_counts.items():
            units = ceil(billed_ms / card.serverless.billing_quantum_ms)
            total += Decimal(count) * Decimal(units) * quantum / Decimal(1000) * Decimal(str(self.memory_mb)) / Decimal(1024)
        return total


def dispatch_core(pool: ServerlessPool, now_ms: float, exec_ms: float,
                  keep_alive_ms: float, cold_overhead_ms: float,
                  billed_overhead_ms: float) -> tuple[float, bool, float]:
    """Warm-pool mechanics shared by the public dispatch and the event loop.

    Returns (latency_ms, cold, billed_ms) and updates the pool's ledgers.
    """
    warm = pool.warm
    # expired containers can never serve again
    expired = bisect_right(warm, now_ms - keep_alive_ms)
    if expired:
        del warm[:expired]
    idx = bisect_right(warm, now_ms) - 1
    if idx >= 0:
        # most-recently-used: lets the oldest idle containers age out
        del warm[idx]
        cold = False
        latency = exec_ms
        billed_ms = exec_ms
    else:
        cold = True
        latency = cold_overhead_ms + billed_overhead_ms + exec_ms
        billed_ms = billed_overhead_ms + exec_ms
        pool.cold_starts += 1
    insort(warm, now_ms + latency)
    pool.invocations += 1
    pool.billed_counts[billed_ms] = pool.billed_counts.get(billed_ms, 0) + 1
    return latency, cold, billed_ms


def serverless_dispatch(pool: ServerlessPool, now_ms: float, exec_ms: float, card: RateCard) -> DispatchOutcome:
    """Run one invocation on the pool at ``now_ms``, consuming a warm container if any.

    Cold invocations pay container init (unbilled) plus model load (billed,
    it runs inside the function) on top of execution.
    """
    sl = card.serverless
    latency, cold, billed_ms = dispatch_core(
        pool, now_ms, exec_ms, sl.keep_alive_s * 1000.0, sl.cold_start_ms, sl.model_load_ms,
    )
    cost = pool._cost_cache.get(billed_ms)
    if cost is None:
        cost = serverless_invocation_cost(billed_ms, pool.memory_mb, card)
        pool._cost_cache[billed_ms] = cost
    return DispatchOutcome(latency_ms=latency, cost=cost, cold=cold, billed_ms=billed_ms)


# --- VM instances ----------------------------------------------------------

PROVISIONING = "provisioning"
ACTIVE = "active"
DRAINING = "draining"
TERMINATED = "terminated"


class VmInstance:
    """One VM over its lifecycle; billed from launch until termination."""

    __slots__ = ("id", "vm_type", "state", "launch_ms", "ready_ms", "terminate_ms",
                 "busy_slots", "total_slots", "idle_since_ms")

    def __init__(self, vm_id: int, vm_type: str, launch_ms: float, ready_ms: float, total_slots: int):
        self.id = vm_id
        self.vm_type = vm_type
        self.state = PROVISIONING
        self.launch_ms = launch_ms
        self.ready_ms = ready_ms
        self.terminate_ms: float | None = None
        self.busy_slots = 0
        self.total_slots = total_slots
        self.idle_since_ms = ready_ms

    def billed_seconds(self) -> float:
        end = self.terminate_ms if self.terminate_ms is not None else self.launch_ms
        return max(0.0, (end - self.launch_ms) / 1000.0)


# --- Reference costing for model selection ---------------------------------


def cost_per_million(
    model: ModelProfile,
    card: RateCard,
    vm_type: str,
    rate_per_s: float = 100.0,
    latency_budget_ms: float | None = None,
    reference_vm_type: str | None = None,
) -> tuple[Decimal, str]:
    """Cost of serving one million queries at a steady reference rate.

    Evaluates both a right-sized VM fleet and the cheapest feasible serverless
    configuration, returning the lower cost with a deployment hint.
    """
    if rate_per_s <= 0:
        raise ValidationError("rate_per_s must be > 0")
    slots = vm_capacity(vm_type, model, card, reference_vm_type)
    concurrency = rate_per_s * model.ref_latency_ms / 1000.0
    vms = max(1, ceil(concurrency / slots))
    duration_s = 1_000_000 / rate_per_s
    vm_total = (Decimal(vms) * vm_cost(duration_s, vm_type, card)).quantize(MONEY_EXP)
    try:
        memory = choose_serverless_memory(model, latency_budget_ms, card)
        exec_ms = serverless_exec_latency(model, memory, card)
        sl_total = (Decimal(1_000_000) * serverless_invocation_cost(exec_ms, memory, card)).quantize(MONEY_EXP)
    except InfeasibleError:
        return vm_total, "vm"
    if vm_total < sl_total:
        return vm_total, "vm"
    if sl_total < vm_total:
        return sl_total, "serverless"
    return vm_total, "either"


def make_cost_fn(card: RateCard, vm_type: str, rate_per_s: float = 100.0,
                 reference_vm_type: str | None = None):
    """Cost function for selection: model + constraints -> cost/1M queries."""

    def cost_fn(model: ModelProfile, constraints=None) -> Decimal:
        budget = constraints.latency_max_ms if constraints is not None else None
        return cost_per_million(
            model, card, vm_type, rate_per_s,
            latency_budget_ms=budget, reference_vm_type=reference_vm_type,
        )[0]

    return cost_fn
