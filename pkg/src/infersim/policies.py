"""Resource-procurement policies: per-tick scaling plans and per-query routing.

Five schemes share one interface:

* ``reactive``   - scale to the currently observed rate once work queues up.
* ``util_aware`` - threshold autoscaler on measured slot utilization.
* ``exascale``   - provision for predicted demand plus a headroom fraction.
* ``mixed``      - reactive VM plan; overflow runs on serverless functions.
* ``paragon``    - util_aware plan gated by trace burstiness; only
                   strict-latency overflow is offloaded to serverless.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from math import ceil
from typing import NamedTuple, Sequence

from .catalog import ModelProfile
from .cloudmodel import ACTIVE, PROVISIONING, TERMINATED, ServerlessPool, VmInstance
from .errors import ValidationError
from .workload import RELAXED, STRICT, QuerySpec, peak_to_median_from_counts

POLICY_KINDS = ("reactive", "util_aware", "exascale", "mixed", "paragon")
VM_ONLY_KINDS = frozenset({"reactive", "util_aware", "exascale"})


@dataclass(frozen=True)
class PolicySpec:
    """A procurement scheme plus its tunables.

    Fields irrelevant to a kind are ignored by it but still validated, so one
    config block can drive every scheme.
    """

    kind: str
    theta: float = 0.8
    beta: float = 0.2
    predictor_window_s: int = 60
    tick_interval_s: int = 10
    idle_timeout_s: int = 60
    p2m_gate_pct: float = 50.0
    p2m_window_s: int = 300

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValidationError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        if not 0 < self.theta <= 1:
            raise ValidationError("theta must be in (0, 1]")
        if self.beta < 0:
            raise ValidationError("beta must be >= 0")
        if self.predictor_window_s < 1 or self.tick_interval_s < 1 or self.idle_timeout_s < 0:
            raise ValidationError("window/tick/idle settings must be positive")
        if not 0 <= self.p2m_gate_pct < 100:
            raise ValidationError("p2m_gate_pct must be within [0, 100)")
        if self.p2m_window_s < 1:
            raise ValidationError("p2m_window_s must be >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "theta": self.theta,
            "beta": self.beta,
            "predictor_window_s": self.predictor_window_s,
            "tick_interval_s": self.tick_interval_s,
            "idle_timeout_s": self.idle_timeout_s,
            "p2m_gate_pct": self.p2m_gate_pct,
            "p2m_window_s": self.p2m_window_s,
        }


@dataclass(frozen=True)
class ScalingDecision:
    launch: dict[str, int] = field(default_factory=dict)
    terminate: tuple[int, ...] = ()

    def is_noop(self) -> bool:
        return not self.terminate and not any(self.launch.values())


class RoutingDecision(NamedTuple):
    action: str  # assign | serverless | enqueue
    vm_id: int | None = None
    memory_mb: int | None = None


class ClusterState:
    """Mutable world of one simulation run, as visible to a policy.

    Owned and mutated by a single run's event loop; accounting integrals make
    tick-window utilization exact without sampling noise.
    """

    def __init__(self, vm_type: str, slots_per_vm: int, exec_ms: float,
                 max_vms: int | None = None):
        self.vm_type = vm_type
        self.slots_per_vm = slots_per_vm
        self.exec_ms = exec_ms
        self.max_vms = max_vms
        self.vms: dict[int, VmInstance] = {}
        self.strict_queue: deque = deque()
        self.relaxed_queue: deque = deque()
        self.pools: dict[int, ServerlessPool] = {}
        self.arrival_counts: list[int] = []
        self.busy_total = 0
        self.active_slots = 0
        self.active_count = 0
        self.provisioning_count = 0
        self.offloads_since_tick = 0
        self.last_tick_ms = 0.0
        # time integrals of busy slots and active slots, for averaged utilization
        self._busy_integral = 0.0
        self._slot_integral = 0.0
        self._busy_integral_at_tick = 0.0
        self._slot_integral_at_tick = 0.0
        self._last_accrual_ms = 0.0

    # -- accounting --------------------------------------------------------

    def accrue(self, now_ms: float) -> None:
        dt = now_ms - self._last_accrual_ms
        if dt > 0:
            self._busy_integral += self.busy_total * dt
            self._slot_integral += self.active_slots * dt
            self._last_accrual_ms = now_ms

    def record_arrival(self, t_ms: float) -> None:
        sec = int(t_ms // 1000.0)
        counts = self.arrival_counts
        while len(counts) <= sec:
            counts.append(0)
        counts[sec] += 1

    def tick_window_stats(self, now_ms: float) -> tuple[float, float]:
        """(average busy slots, average utilization) since the previous tick."""
        self.accrue(now_ms)
        window = now_ms - self.last_tick_ms
        if window <= 0:
            return 0.0, 0.0
        busy = (self._busy_integral - self._busy_integral_at_tick) / window
        slot_time = self._slot_integral - self._slot_integral_at_tick
        util = (self._busy_integral - self._busy_integral_at_tick) / slot_time if slot_time > 0 else 0.0
        return busy, util

    def mark_tick(self, now_ms: float) -> None:
        self.accrue(now_ms)
        self.last_tick_ms = now_ms
        self._busy_integral_at_tick = self._busy_integral
        self._slot_integral_at_tick = self._slot_integral
        self.offloads_since_tick = 0

    # -- views -------------------------------------------------------------

    def utilization(self) -> float:
        """Instantaneous busy/active slot ratio (0 with no active VM)."""
        return self.busy_total / self.active_slots if self.active_slots > 0 else 0.0

    def queue_len(self) -> int:
        return len(self.strict_queue) + len(self.relaxed_queue)

    def provisioned_count(self) -> int:
        return self.active_count + self.provisioning_count

    def completed_seconds(self, now_ms: float) -> int:
        return int(now_ms // 1000.0)

    def last_second_rate(self, now_ms: float) -> float:
        sec = self.completed_seconds(now_ms) - 1
        if sec < 0 or sec >= len(self.arrival_counts):
            return 0.0
        return float(self.arrival_counts[sec])

    def count_history(self, now_ms: float, window_s: int) -> list[int]:
        """Per-second counts of the last ``window_s`` completed seconds (zero-padded)."""
        end = self.completed_seconds(now_ms)
        start = max(0, end - window_s)
        if end <= 0:
            return []
        counts = self.arrival_counts
        window = [counts[s] if s < len(counts) else 0 for s in range(start, end)]
        return window

    def rolling_p2m(self, now_ms: float, window_s: int) -> float:
        return peak_to_median_from_counts(self.count_history(now_ms, window_s))

    def idle_vms(self, now_ms: float, min_idle_s: float) -> list[int]:
        """Active, empty VMs idle for at least ``min_idle_s``, newest first."""
        cutoff = min_idle_s * 1000.0
        out = [
            vm.id
            for vm in self.vms.values()
            if vm.state == ACTIVE and vm.busy_slots == 0 and now_ms - vm.idle_since_ms >= cutoff
        ]
        out.sort(reverse=True)
        return out

    def next_provisioning_ready_ms(self) -> float | None:
        ready = [vm.ready_ms for vm in self.vms.values() if vm.state == PROVISIONING]
        return min(ready) if ready else None

    def first_free_vm(self) -> VmInstance | None:
        """Lowest-id active VM with a free slot (linear scan; engine keeps a heap)."""
        best = None
        for vm in self.vms.values():
            if vm.state == ACTIVE and vm.busy_slots < vm.total_slots:
                if best is None or vm.id < best.id:
                    best = vm
        return best


# --- Demand estimation ------------------------------------------------------


def predict_demand(history: Sequence[float], window_s: int) -> float:
    """Peak-hold prediction: the max per-second count in the last window."""
    if not history:
        return 0.0
    window = history[-window_s:] if window_s < len(history) else history
    return float(max(window))


def required_vms(rate_per_s: float, exec_ms: float, slots_per_vm: int) -> int:
    """VMs needed to serve ``rate_per_s`` with per-query time ``exec_ms``.

    Offered load in service slots (rate x exec) divided by slots per VM,
    rounded up; zero demand needs zero VMs.
    """
    if exec_ms <= 0:
        raise ValidationError("exec_ms must be > 0")
    if slots_per_vm < 1:
        raise ValidationError("slots_per_vm must be >= 1")
    if rate_per_s <= 0:
        return 0
    return ceil(rate_per_s * exec_ms / 1000.0 / slots_per_vm)


# --- Per-tick scaling -------------------------------------------------------


def _demand_trigger(policy: PolicySpec, state: ClusterState) -> bool:
    if state.queue_len() > 0:
        return True
    # offloaded overflow is unmet VM demand for the serverless-capable kinds
    return policy.kind in ("mixed", "paragon") and state.offloads_since_tick > 0


def _reactive_need(policy: PolicySpec, state: ClusterState, now_ms: float) -> int:
    if not _demand_trigger(policy, state):
        return 0
    need = required_vms(state.last_second_rate(now_ms), state.exec_ms, state.slots_per_vm)
    # queued work always warrants at least one VM, even after arrivals stop
    return max(need, 1)


def _plan_reactive(policy: PolicySpec, state: ClusterState, now_ms: float) -> ScalingDecision:
    need = _reactive_need(policy, state, now_ms)
    launch = max(0, need - state.provisioned_count())
    terminate = tuple(state.idle_vms(now_ms, policy.idle_timeout_s))
    return ScalingDecision(launch={state.vm_type: launch} if launch else {}, terminate=terminate)


def _plan_util_aware(policy: PolicySpec, state: ClusterState, now_ms: float) -> ScalingDecision:
    avg_busy, util = state.tick_window_stats(now_ms)
    target = ceil(avg_busy / (policy.theta * state.slots_per_vm)) if avg_busy > 0 else 0
    launch = 0
    terminate: tuple[int, ...] = ()
    if state.provisioned_count() == 0 and _demand_trigger(policy, state):
        # utilization is undefined with no capacity; bootstrap one VM
        launch = 1
    elif util >= policy.theta and state.active_slots > 0:
        launch = max(0, target - state.provisioned_count())
    elif util < policy.theta / 2.0:
        # hysteresis band: shed idle capacity only when clearly under-used
        surplus = state.active_count - target
        if surplus > 0:
            idle = state.idle_vms(now_ms, 0.0)
            terminate = tuple(idle[:surplus])
    return ScalingDecision(launch={state.vm_type: launch} if launch else {}, terminate=terminate)


def _plan_exascale(policy: PolicySpec, state: ClusterState, now_ms: float) -> ScalingDecision:
    history = state.count_history(now_ms, policy.predictor_window_s)
    predicted = predict_demand(history, policy.predictor_window_s)
    need = required_vms(predicted * (1.0 + policy.beta), state.exec_ms, state.slots_per_vm)
    target = max(need, _reactive_need(policy, state, now_ms))  # never below reactive
    launch = max(0, target - state.provisioned_count())
    terminate: tuple[int, ...] = ()
    surplus = state.active_count - target
    if surplus > 0:
        idle = state.idle_vms(now_ms, policy.idle_timeout_s)
        terminate = tuple(idle[:surplus])
    return ScalingDecision(launch={state.vm_type: launch} if launch else {}, terminate=terminate)


def tick(policy: PolicySpec, state: ClusterState, now_ms: float) -> ScalingDecision:
    """Scaling decision for this tick; the caller executes it and marks the tick."""
    if policy.kind in ("reactive", "mixed"):
        return _plan_reactive(policy, state, now_ms)
    if policy.kind == "util_aware":
        return _plan_util_aware(policy, state, now_ms)
    if policy.kind == "exascale":
        return _plan_exascale(policy, state, now_ms)
    if policy.kind == "paragon":
        p2m = state.rolling_p2m(now_ms, policy.p2m_window_s)
        if p2m < policy.p2m_gate_pct:
            # steady stretch: serverless offload won't pay off, buy VMs ahead
            return _plan_exascale(policy, state, now_ms)
        return _plan_util_aware(policy, state, now_ms)
    raise ValidationError(f"unknown policy kind {policy.kind!r}")


# --- Per-query routing -------------------------------------------------------


def estimate_wait_ms(state: ClusterState, queue_ahead: int) -> float:
    """Expected wait before a queued query starts, from current service capacity."""
    next_ready = state.next_provisioning_ready_ms()
    if state.active_slots > 0:
        service_per_ms = state.active_slots / state.exec_ms
        wait = (queue_ahead + 1) / service_per_ms
    else:
        wait = float("inf")
    if next_ready is not None:
        wait = min(wait, max(0.0, next_ready))
    return wait


def route_overflow(
    policy: PolicySpec,
    query: QuerySpec,
    state: ClusterState,
    now_ms: float,
    serverless_options_ms: Sequence[tuple[int, float]],
) -> RoutingDecision:
    """Routing when no active VM has a free slot.

    ``serverless_options_ms`` is the model's ascending (memory, exec latency)
    table, precomputed by the caller.
    """
    kind = policy.kind
    if kind in VM_ONLY_KINDS:
        return RoutingDecision("enqueue")
    elapsed = now_ms - query.arrival_ms
    latency_max = query.constraints.latency_max_ms
    if kind == "mixed":
        budget = None if latency_max is None else latency_max - elapsed
        memory = pick_memory(serverless_options_ms, budget)
        if memory is None:
            return RoutingDecision("enqueue")
        return RoutingDecision("serverless", memory_mb=memory)
    if kind == "paragon":
        if query.slo_class != STRICT:
            return RoutingDecision("enqueue")
        if latency_max is None:
            return RoutingDecision("enqueue")
        wait_budget = latency_max - state.exec_ms - elapsed
        next_ready = state.next_provisioning_ready_ms()
        ready_in = (next_ready - now_ms) if next_ready is not None else float("inf")
        expected_wait = min(estimate_wait_ms(state, len(state.strict_queue)), ready_in)
        if wait_budget < expected_wait:
            memory = pick_memory(serverless_options_ms, latency_max - elapsed)
            if memory is None:
                return RoutingDecision("enqueue")
            return RoutingDecision("serverless", memory_mb=memory)
        return RoutingDecision("enqueue")
    raise ValidationError(f"unknown policy kind {kind!r}")


def pick_memory(options: Sequence[tuple[int, float]], budget_ms: float | None) -> int | None:
    """Smallest (memory, latency) option fitting the budget, or None."""
    if budget_ms is not None and budget_ms <= 0:
        return None
    for memory, exec_ms in options:
        if budget_ms is None or exec_ms <= budget_ms:
            return memory
    return None


def route(
    policy: PolicySpec,
    query: QuerySpec,
    state: ClusterState,
    now_ms: float,
    serverless_options_ms: Sequence[tuple[int, float]],
) -> RoutingDecision:
    """Full routing decision: free slot first, then the per-kind overflow rule."""
    if query.arrival_ms > now_ms:
        raise ValidationError("cannot route a query before it arrives")
    vm = state.first_free_vm()
    if vm is not None:
        return RoutingDecision("assign", vm_id=vm.id)
    return route_overflow(policy, query, state, now_ms, serverless_options_ms)


def dequeue_on_slot_free(policy: PolicySpec, state: ClusterState, now_ms: float,
                         strict_priority: bool = True):
    """Next queued query to start: strict before relaxed, FIFO within a class."""
    if strict_priority:
        if state.strict_queue:
            return state.strict_queue.popleft()
        if state.relaxed_queue:
            return state.relaxed_queue.popleft()
        return None
    # single FIFO across classes by enqueue time
    sq, rq = state.strict_queue, state.relaxed_queue
    if sq and rq:
        return sq.popleft() if sq[0][1] <= rq[0][1] else rq.popleft()
    if sq:
        return sq.popleft()
    if rq:
        return rq.popleft()
    return None
