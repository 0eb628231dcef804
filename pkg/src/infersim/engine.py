"""Deterministic discrete-event loop binding workload, cloud model and policies.

One run simulates one model pool on one VM type.  Events are processed in
(time, kind priority, sequence) order with capacity changes visible before new
work at the same instant:

    VmReady < RequestComplete < Arrival < PolicyTick < IdleCheck < TraceEnd

The loop merges four already-ordered sources (control heap, VM completions,
serverless completions, the arrival stream) instead of pushing every arrival
through one heap; the observable order is identical and million-event traces
stay fast.  VM execution time is constant within a run, so VM completions form
a FIFO.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from array import array

import numpy as np
from collections import deque
from dataclasses import dataclass, field
from decimal import Decimal
from math import ceil, inf
from operator import itemgetter
from typing import Sequence

from . import policies as pol
from .catalog import ModelProfile, catalog_by_name
from .cloudmodel import (
    ACTIVE,
    PROVISIONING,
    RateCard,
    ServerlessPool,
    TERMINATED,
    VmInstance,
    ZERO_MONEY,
    dispatch_core,
    serverless_invocation_cost,
    serverless_options,
    vm_capacity,
    vm_cost,
)
from .errors import ComparisonError, ConfigurationError, ValidationError, VerificationError
from .workload import STRICT, ArrivalTrace, QuerySpec

# event kind priorities: capacity first, then completions, then new work
PRIO_VM_READY = 0
PRIO_COMPLETE = 1
PRIO_ARRIVAL = 2
PRIO_POLICY_TICK = 3
PRIO_IDLE_CHECK = 4
PRIO_TRACE_END = 5

EVENT_KIND_PRIORITY = {
    "VmReady": PRIO_VM_READY,
    "RequestComplete": PRIO_COMPLETE,
    "Arrival": PRIO_ARRIVAL,
    "PolicyTick": PRIO_POLICY_TICK,
    "IdleCheck": PRIO_IDLE_CHECK,
    "TraceEnd": PRIO_TRACE_END,
}

LEDGER_HEADER = "query_id,model,class,arrival_ms,start_ms,finish_ms,resource,cold,response_ms,violated"


@dataclass
class MetricsReport:
    """Per-run accounting: costs, SLO violations, utilization and ledgers."""

    policy: dict
    vm_type: str
    model_names: list[str]
    seed: int
    config_hash: str
    trace_hash: str
    requests_total: int
    requests_strict: int
    requests_relaxed: int
    violations_total: int
    violations_strict: int
    violations_relaxed: int
    slo_violation_pct: float
    response_mean_ms: float
    response_p95_ms: float
    response_p99_ms: float
    response_max_ms: float
    total_cost: Decimal
    vm_cost: Decimal
    serverless_cost: Decimal
    vm_seconds_provisioned: float
    vm_instances: list[dict]
    serverless_invocations: int
    serverless_cold_starts: int
    serverless_ledger: list[dict]
    warnings: dict
    utilization: list[list[float]]
    rate_card: dict
    ledger: list[tuple] | None = None
    _responses: list[float] | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        data = {
            "schema": "infersim.report.v1",
            "policy": self.policy,
            "vm_type": self.vm_type,
            "model_names": self.model_names,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "trace_hash": self.trace_hash,
            "requests": {
                "total": self.requests_total,
                "strict": self.requests_strict,
                "relaxed": self.requests_relaxed,
            },
            "violations": {
                "total": self.violations_total,
                "strict": self.violations_strict,
                "relaxed": self.violations_relaxed,
            },
            "slo_violation_pct": self.slo_violation_pct,
            "response_ms": {
                "mean": self.response_mean_ms,
                "p95": self.response_p95_ms,
                "p99": self.response_p99_ms,
                "max": self.response_max_ms,
            },
            "cost": {
                "total": str(self.total_cost),
                "vm": str(self.vm_cost),
                "serverless": str(self.serverless_cost),
            },
            "vm": {
                "seconds_provisioned": self.vm_seconds_provisioned,
                "instances": self.vm_instances,
            },
            "serverless": {
                "invocations": self.serverless_invocations,
                "cold_starts": self.serverless_cold_starts,
                "ledger": self.serverless_ledger,
            },
            "warnings": self.warnings,
            "utilization": self.utilization,
            "rate_card": self.rate_card,
        }
        if self.ledger is not None:
            data["ledger"] = [list(row) for row in self.ledger]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        if data.get("schema") != "infersim.report.v1":
            raise ValidationError(f"unsupported report schema {data.get('schema')!r}")
        ledger = data.get("ledger")
        return cls(
            policy=data["policy"],
            vm_type=data["vm_type"],
            model_names=list(data["model_names"]),
            seed=data["seed"],
            config_hash=data["config_hash"],
            trace_hash=data["trace_hash"],
            requests_total=data["requests"]["total"],
            requests_strict=data["requests"]["strict"],
            requests_relaxed=data["requests"]["relaxed"],
            violations_total=data["violations"]["total"],
            violations_strict=data["violations"]["strict"],
            violations_relaxed=data["violations"]["relaxed"],
            slo_violation_pct=data["slo_violation_pct"],
            response_mean_ms=data["response_ms"]["mean"],
            response_p95_ms=data["response_ms"]["p95"],
            response_p99_ms=data["response_ms"]["p99"],
            response_max_ms=data["response_ms"]["max"],
            total_cost=Decimal(data["cost"]["total"]),
            vm_cost=Decimal(data["cost"]["vm"]),
            serverless_cost=Decimal(data["cost"]["serverless"]),
            vm_seconds_provisioned=data["vm"]["seconds_provisioned"],
            vm_instances=list(data["vm"]["instances"]),
            serverless_invocations=data["serverless"]["invocations"],
            serverless_cold_starts=data["serverless"]["cold_starts"],
            serverless_ledger=list(data["serverless"]["ledger"]),
            warnings=dict(data["warnings"]),
            utilization=[list(x) for x in data["utilization"]],
            rate_card=data["rate_card"],
            ledger=[tuple(row) for row in ledger] if ledger is not None else None,
        )

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def ledger_csv(self) -> str:
        if self.ledger is None:
            raise VerificationError("report has no per-request ledger")
        lines = [LEDGER_HEADER]
        for (qid, model, cls, arr, start, fin, resource, cold, resp, violated) in self.ledger:
            lines.append(f"{qid},{model},{cls},{arr:g},{start:g},{fin:g},{resource},{cold},{resp:g},{violated}")
        return "\n".join(lines) + "\n"


def trace_fingerprint(trace: ArrivalTrace, queries: Sequence[QuerySpec]) -> str:
    """Stable digest of the workload: arrival times plus per-query class/model/SLO."""
    h = hashlib.sha256()
    h.update(str(trace.duration_ms).encode())
    h.update(array("d", trace.arrivals_ms).tobytes())
    h.update(array("d", [q.constraints.latency_max_ms if q.constraints.latency_max_ms is not None else -1.0
                         for q in queries]).tobytes())
    h.update(bytes(1 if q.slo_class == STRICT else 0 for q in queries))
    h.update("|".join(q.model_name for q in queries).encode())
    return h.hexdigest()


def _config_fingerprint(trace_hash: str, policy: pol.PolicySpec, card: RateCard,
                        model: ModelProfile, vm_type: str, seed: int,
                        initial_vms: int, max_vms, strict_priority: bool) -> str:
    payload = {
        "trace": trace_hash,
        "policy": policy.to_dict(),
        "card": card.to_dict(),
        "model": {
            "name": model.name,
            "accuracy_pct": model.accuracy_pct,
            "ref_latency_ms": model.ref_latency_ms,
            "memory_mb": model.memory_mb,
            "vm_slots": dict(sorted(model.vm_slots.items())),
            "serverless_latency_ms": {str(k): v for k, v in sorted(model.serverless_latency_ms.items())},
        },
        "vm_type": vm_type,
        "seed": seed,
        "initial_vms": initial_vms,
        "max_vms": max_vms,
        "strict_priority": strict_priority,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _percentile(ordered, pct: float) -> float:
    n = len(ordered)
    if not n:
        return 0.0
    rank = max(1, ceil(pct / 100.0 * n))
    return float(ordered[rank - 1])


def run(
    trace: ArrivalTrace,
    queries: Sequence[QuerySpec],
    policy: pol.PolicySpec,
    card: RateCard,
    catalog: Sequence[ModelProfile],
    seed: int = 0,
    *,
    vm_type: str,
    initial_vms: int = 0,
    max_vms: int | None = None,
    keep_ledger: bool = True,
    strict_priority: bool = True,
    reference_vm_type: str | None = None,
    trace_hash: str | None = None,
) -> MetricsReport:
    """Simulate one policy over one trace and return its MetricsReport.

    Queries must align 1:1 with trace arrivals and share a single model (a
    multi-model workload is composed of parallel runs, one per model).  The
    run drains past the trace end until all queued and in-flight work
    completes, then idle timeouts retire the fleet; billing stops at each
    instance's termination.
    """
    if len(queries) != len(trace.arrivals_ms):
        raise ValidationError("queries must align 1:1 with trace arrivals")
    if list(map(itemgetter(1), queries)) != list(trace.arrivals_ms):
        for q, t in zip(queries, trace.arrivals_ms):
            if q.arrival_ms != t:
                raise ValidationError(f"query {q.id} arrival {q.arrival_ms} does not match trace ({t})")
    by_name = catalog_by_name(catalog)
    if queries:
        names = {q.model_name for q in queries}
        if len(names) > 1:
            raise ValidationError(f"one run serves one model; got {sorted(names)} (partition the workload)")
        model_name = queries[0].model_name
        if model_name not in by_name:
            raise ConfigurationError(f"model {model_name!r} not in catalog")
        model = by_name[model_name]
    else:
        if not catalog:
            raise ConfigurationError("empty model catalog")
        model = catalog[0]
    spec = card.vm(vm_type)
    slots = vm_capacity(vm_type, model, card, reference_vm_type)
    exec_ms = model.ref_latency_ms
    prov_ms = spec.provision_delay_s * 1000.0
    sl_options = serverless_options(model, card)
    if initial_vms < 0:
        raise ValidationError("initial_vms must be >= 0")
    if max_vms is not None:
        if max_vms < initial_vms:
            raise ValidationError("max_vms must be >= initial_vms")
        if max_vms == 0 and policy.kind != "mixed":
            raise ConfigurationError("max_vms=0 (serverless-only) requires the mixed policy")
        if max_vms == 0 and not sl_options:
            raise ConfigurationError(f"model {model.name!r} has no serverless configuration")

    if trace_hash is None:
        trace_hash = trace_fingerprint(trace, queries)
    config_hash = _config_fingerprint(trace_hash, policy, card, model, vm_type, seed,
                                      initial_vms, max_vms, strict_priority)

    state = pol.ClusterState(vm_type=vm_type, slots_per_vm=slots, exec_ms=exec_ms, max_vms=max_vms)
    kind = policy.kind
    vm_only = kind in pol.VM_ONLY_KINDS
    tick_ms = policy.tick_interval_s * 1000.0

    arr = list(trace.arrivals_ms)
    n = len(arr)
    if queries:
        constraints_seq = list(map(itemgetter(3), queries))
        if len(set(map(id, constraints_seq))) == 1:
            c0 = constraints_seq[0]
            lat_max = [inf if c0.latency_max_ms is None else c0.latency_max_ms] * n
        else:
            lat_max = [inf if c.latency_max_ms is None else c.latency_max_ms for c in constraints_seq]
        classes = list(map(itemgetter(2), queries))
        if len(set(classes)) == 1:
            is_strict = [classes[0] == STRICT] * n
        else:
            is_strict = [s == STRICT for s in classes]
    else:
        lat_max = []
        is_strict = []

    # event sources (each individually ordered); a serverless finish changes no
    # other event's outcome, so its terminal record is written at dispatch and
    # only its finish time is kept to bound the drain horizon
    ctrl: list[tuple] = []            # heap: (time, prio, seq, tag, payload)
    vm_comp: deque = deque()          # FIFO: (time, seq, qidx, vm_id, start_ms)
    free_mask = 0                     # bit i set <=> vm i is active with a free slot
    vm_list: list[VmInstance | None] = []  # id-indexed; lowest-id-first = lowest set bit
    seq = 0
    INF = inf

    vms = state.vms
    finished_vms: list[VmInstance] = []
    next_vm_id = 0
    alive_vms = 0
    last_sl_finish = 0.0

    responses: list[float] = []
    records: list[tuple] | None = [] if keep_ledger else None
    viol_total = viol_strict = 0
    warnings = {"serverless_infeasible": 0, "forced_serverless": 0}
    util_series: list[list[float]] = []
    strict_q = state.strict_queue
    relaxed_q = state.relaxed_queue
    counts = state.arrival_counts
    pools = state.pools
    sl_latency = dict(sl_options)
    arrival_memory: list[int | None] = []
    if kind == "mixed":
        memo: dict[float, int | None] = {}
        for lm in lat_max:
            if lm not in memo:
                memo[lm] = pol.pick_memory(sl_options, None if lm == inf else lm)
            arrival_memory.append(memo[lm])

    # hot counters live in locals and are flushed into state at policy ticks;
    # state.active_slots is kept current because routing reads it
    busy_total = 0
    busy_integral = 0.0
    slot_integral = 0.0
    last_accrual = 0.0
    active_slots = 0
    offloads = 0
    last_memory = -1
    last_pool = None

    heappush = heapq.heappush
    heappop = heapq.heappop
    route_overflow = pol.route_overflow
    dequeue_next = pol.dequeue_on_slot_free

    # cached head of the control heap (sentinel when empty)
    ctrl_t = INF
    ctrl_p = 9
    ctrl_s = -1

    def refresh_ctrl() -> None:
        nonlocal ctrl_t, ctrl_p, ctrl_s
        if ctrl:
            e = ctrl[0]
            ctrl_t = e[0]
            ctrl_p = e[1]
            ctrl_s = e[2]
        else:
            ctrl_t = INF

    def push_ctrl(t: float, prio: int, tag: str, payload) -> None:
        nonlocal seq
        heappush(ctrl, (t, prio, seq, tag, payload))
        seq += 1
        refresh_ctrl()

    def sync_state(now: float) -> None:
        state.busy_total = busy_total
        state._busy_integral = busy_integral
        state._slot_integral = slot_integral
        state._last_accrual_ms = last_accrual
        state.offloads_since_tick = offloads

    def start_on_vm(vm: VmInstance, qidx: int, now: float) -> None:
        nonlocal seq, busy_total, busy_integral, slot_integral, last_accrual
        dt = now - last_accrual
        if dt > 0.0:
            busy_integral += busy_total * dt
            slot_integral += active_slots * dt
            last_accrual = now
        vm.busy_slots += 1
        busy_total += 1
        assert vm.busy_slots <= vm.total_slots, "slot over-subscription"
        vm_comp.append((now + exec_ms, seq, qidx, vm.id, now))
        seq += 1

    def activate_vm(vm: VmInstance, now: float) -> None:
        nonlocal busy_integral, slot_integral, last_accrual, active_slots, free_mask
        dt = now - last_accrual
        if dt > 0.0:
            busy_integral += busy_total * dt
            slot_integral += active_slots * dt
            last_accrual = now
        vm.state = ACTIVE
        vm.idle_since_ms = now
        state.provisioning_count -= 1
        state.active_count += 1
        active_slots += vm.total_slots
        state.active_slots = active_slots
        while vm.busy_slots < vm.total_slots and (strict_q or relaxed_q):
            entry = dequeue_next(policy, state, now, strict_priority)
            if entry is None:
                break
            start_on_vm(vm, entry[0], now)
        if vm.busy_slots < vm.total_slots:
            free_mask |= 1 << vm.id

    def launch_vm(now: float) -> None:
        nonlocal next_vm_id, alive_vms
        vm = VmInstance(next_vm_id, vm_type, launch_ms=now, ready_ms=now + prov_ms, total_slots=slots)
        next_vm_id += 1
        alive_vms += 1
        vms[vm.id] = vm
        vm_list.append(vm)
        state.provisioning_count += 1
        if prov_ms > 0:
            push_ctrl(vm.ready_ms, PRIO_VM_READY, "VmReady", vm.id)
        else:
            activate_vm(vm, now)

    def terminate_vm(vm: VmInstance, now: float) -> None:
        nonlocal alive_vms, busy_integral, slot_integral, last_accrual, active_slots, free_mask
        assert vm.busy_slots == 0, "terminating a busy VM"
        dt = now - last_accrual
        if dt > 0.0:
            busy_integral += busy_total * dt
            slot_integral += active_slots * dt
            last_accrual = now
        if vm.state == ACTIVE:
            active_slots -= vm.total_slots
            state.active_slots = active_slots
            state.active_count -= 1
        else:
            state.provisioning_count -= 1
        vm.state = TERMINATED
        vm.terminate_ms = now
        alive_vms -= 1
        del vms[vm.id]
        free_mask &= ~(1 << vm.id)
        finished_vms.append(vm)

    keep_alive_ms = card.serverless.keep_alive_s * 1000.0
    cold_start_ms = card.serverless.cold_start_ms
    model_load_ms = card.serverless.model_load_ms

    def nonlocal_offload() -> None:
        nonlocal offloads
        offloads += 1
        state.offloads_since_tick = offloads

    def dispatch_serverless(qidx: int, now: float, memory: int) -> None:
        nonlocal last_sl_finish, viol_total, viol_strict
        pool = pools.get(memory)
        if pool is None:
            pool = pools[memory] = ServerlessPool(memory)
        latency, cold, _billed = dispatch_core(
            pool, now, sl_latency[memory], keep_alive_ms, cold_start_ms, model_load_ms)
        fin = now + latency
        if fin > last_sl_finish:
            last_sl_finish = fin
        resp = fin - arr[qidx]
        responses.append(resp)
        if resp > lat_max[qidx]:
            viol_total += 1
            if is_strict[qidx]:
                viol_strict += 1
        if records is not None:
            records.append((queries[qidx].id, model.name, queries[qidx].slo_class,
                            arr[qidx], now, fin, f"serverless:{memory}", 1 if cold else 0,
                            resp, 1 if resp > lat_max[qidx] else 0))
        nonlocal_offload()

    for _ in range(initial_vms):
        vm = VmInstance(next_vm_id, vm_type, launch_ms=0.0, ready_ms=0.0, total_slots=slots)
        vm.state = ACTIVE
        next_vm_id += 1
        alive_vms += 1
        vms[vm.id] = vm
        vm_list.append(vm)
        state.active_count += 1
        active_slots += slots
        state.active_slots = active_slots
        free_mask |= 1 << vm.id

    strict_total = sum(1 for f in is_strict if f)
    if n or alive_vms:
        push_ctrl(tick_ms, PRIO_POLICY_TICK, "PolicyTick", None)
    push_ctrl(trace.duration_ms, PRIO_TRACE_END, "TraceEnd", None)

    i = 0
    last_t = -1.0
    last_p = -1
    last_s = -1
    end_ms = 0.0
    cur_sec = -1
    sec_end = -1.0
    vms_get = vms.get

    while True:
        # earliest head across the four sources under (time, priority, seq);
        # scalar comparisons keep this allocation-free
        bt = ctrl_t
        bp = ctrl_p
        bs = ctrl_s
        best = 1
        if vm_comp:
            e = vm_comp[0]
            t = e[0]
            if t < bt or (t == bt and (bp > 1 or (bp == 1 and e[1] < bs))):
                bt = t
                bp = 1
                bs = e[1]
                best = 2
        if i < n:
            t = arr[i]
            if t < bt or (t == bt and bp > 2):
                bt = t
                bp = 2
                bs = i
                best = 4
        if bt == INF:
            break
        assert bt > last_t or (bt == last_t and (bp > last_p or (bp == last_p and bs > last_s))), \
            "event order must be a strict total order"
        last_t = bt
        last_p = bp
        last_s = bs
        now = bt
        end_ms = now

        if best == 4:  # arrival
            qidx = i
            i += 1
            if now >= sec_end:
                cur_sec = int(now // 1000.0)
                if cur_sec >= len(counts):
                    counts.extend([0] * (cur_sec + 1 - len(counts)))
                sec_end = cur_sec * 1000.0 + 1000.0
            counts[cur_sec] += 1
            if free_mask:
                bit = free_mask & -free_mask
                vm = vm_list[bit.bit_length() - 1]
                dt = now - last_accrual
                if dt > 0.0:
                    busy_integral += busy_total * dt
                    slot_integral += active_slots * dt
                    last_accrual = now
                b = vm.busy_slots + 1
                vm.busy_slots = b
                busy_total += 1
                assert b <= vm.total_slots, "slot over-subscription"
                vm_comp.append((now + exec_ms, seq, qidx, vm.id, now))
                seq += 1
                if b == vm.total_slots:
                    free_mask ^= bit
            elif vm_only:
                (strict_q if is_strict[qidx] else relaxed_q).append((qidx, now))
            elif kind == "mixed":
                # at arrival time no wait has elapsed, so mixed's memory choice
                # is a pure function of the query's SLO (precomputed)
                memory = arrival_memory[qidx]
                if memory is not None:
                    if memory == last_memory:
                        pool = last_pool
                    else:
                        pool = pools.get(memory)
                        if pool is None:
                            pool = pools[memory] = ServerlessPool(memory)
                        last_memory = memory
                        last_pool = pool
                    latency, cold, _b = dispatch_core(
                        pool, now, sl_latency[memory], keep_alive_ms, cold_start_ms, model_load_ms)
                    fin = now + latency
                    if fin > last_sl_finish:
                        last_sl_finish = fin
                    resp = fin - now
                    responses.append(resp)
                    if resp > lat_max[qidx]:
                        viol_total += 1
                        if is_strict[qidx]:
                            viol_strict += 1
                    if records is not None:
                        records.append((queries[qidx].id, model.name, queries[qidx].slo_class,
                                        now, now, fin, f"serverless:{memory}", 1 if cold else 0,
                                        resp, 1 if resp > lat_max[qidx] else 0))
                    offloads += 1
                else:
                    warnings["serverless_infeasible"] += 1
                    (strict_q if is_strict[qidx] else relaxed_q).append((qidx, now))
            else:
                decision = route_overflow(policy, queries[qidx], state, now, sl_options)
                if decision.action == "serverless":
                    dispatch_serverless(qidx, now, decision.memory_mb)
                else:
                    (strict_q if is_strict[qidx] else relaxed_q).append((qidx, now))

        elif best == 2:  # vm completion
            t, _, qidx, vm_id, start = vm_comp.popleft()
            resp = t - arr[qidx]
            responses.append(resp)
            if resp > lat_max[qidx]:
                viol_total += 1
                if is_strict[qidx]:
                    viol_strict += 1
            if records is not None:
                records.append((queries[qidx].id, model.name, queries[qidx].slo_class,
                                arr[qidx], start, t, f"vm:{vm_id}", 0, resp,
                                1 if resp > lat_max[qidx] else 0))
            vm = vm_list[vm_id]
            dt = t - last_accrual
            if dt > 0.0:
                busy_integral += busy_total * dt
                slot_integral += active_slots * dt
                last_accrual = t
            if strict_q or relaxed_q:
                entry = dequeue_next(policy, state, t, strict_priority)
                vm_comp.append((t + exec_ms, seq, entry[0], vm_id, t))
                seq += 1
            else:
                b = vm.busy_slots - 1
                vm.busy_slots = b
                busy_total -= 1
                if b == 0:
                    vm.idle_since_ms = t
                free_mask |= 1 << vm_id

        else:  # control event
            t, prio, _, tag, payload = heappop(ctrl)
            refresh_ctrl()
            if tag == "VmReady":
                vm = vms_get(payload)
                if vm is not None and vm.state == PROVISIONING:
                    activate_vm(vm, t)
            elif tag == "PolicyTick":
                dt = t - last_accrual
                if dt > 0.0:
                    busy_integral += busy_total * dt
                    slot_integral += active_slots * dt
                    last_accrual = t
                sync_state(t)
                avg_busy, _util = state.tick_window_stats(t)
                util_series.append([t / 1000.0, round(avg_busy, 6), active_slots])
                decision = pol.tick(policy, state, t)
                to_launch = decision.launch.get(vm_type, 0)
                if max_vms is not None:
                    to_launch = min(to_launch, max_vms - alive_vms)
                for _ in range(max(0, to_launch)):
                    launch_vm(t)
                for vm_id in decision.terminate:
                    vm = vms_get(vm_id)
                    if vm is not None and vm.state == ACTIVE and vm.busy_slots == 0:
                        terminate_vm(vm, t)
                sync_state(t)
                state.mark_tick(t)
                offloads = 0
                if (strict_q or relaxed_q) and i >= n and alive_vms == 0 and busy_total == 0:
                    # no VM can ever serve these (e.g. capped fleet): force them
                    # through serverless so every arrival gets a terminal record
                    if not sl_options:
                        raise ConfigurationError(
                            f"queued queries cannot be served: no VMs and no serverless "
                            f"option for {model.name!r}"
                        )
                    while strict_q or relaxed_q:
                        entry = dequeue_next(policy, state, t, strict_priority)
                        dispatch_serverless(entry[0], t, sl_options[0][0])
                        warnings["forced_serverless"] += 1
                work_left = (i < n) or strict_q or relaxed_q or busy_total
                if work_left or alive_vms:
                    push_ctrl(t + tick_ms, PRIO_POLICY_TICK, "PolicyTick", None)
            # IdleCheck is reserved for finer-grained scale-down; idle scans run
            # at policy ticks.  TraceEnd is a marker event.

    if last_sl_finish > end_ms:
        end_ms = last_sl_finish  # drain horizon covers in-flight functions

    # retire anything still alive (ticks normally do this before the loop ends)
    for vm in sorted(vms.values(), key=lambda v: v.id):
        terminate_vm(vm, end_ms)

    vm_total = ZERO_MONEY
    instances = []
    vm_seconds = 0.0
    for vm in sorted(finished_vms, key=lambda v: v.id):
        billed = vm.billed_seconds()
        vm_seconds += billed
        vm_total += vm_cost(billed, vm.vm_type, card)
        instances.append({
            "id": vm.id,
            "vm_type": vm.vm_type,
            "launch_ms": vm.launch_ms,
            "ready_ms": vm.ready_ms,
            "terminate_ms": vm.terminate_ms,
        })

    sl_total = ZERO_MONEY
    sl_ledger = []
    invocations = 0
    cold_starts = 0
    for memory in sorted(state.pools):
        pool = state.pools[memory]
        invocations += pool.invocations
        cold_starts += pool.cold_starts
        for billed_ms in sorted(pool.billed_counts):
            count = pool.billed_counts[billed_ms]
            sl_total += count * serverless_invocation_cost(billed_ms, memory, card)
            sl_ledger.append({"memory_mb": memory, "billed_ms": billed_ms, "count": count})

    assert len(responses) == n, "every arrival must produce exactly one terminal record"
    ordered = np.sort(np.asarray(responses, dtype=np.float64))
    total = int(ordered.size)
    return MetricsReport(
        policy=policy.to_dict(),
        vm_type=vm_type,
        model_names=[model.name] if n else [],
        seed=seed,
        config_hash=config_hash,
        trace_hash=trace_hash,
        requests_total=total,
        requests_strict=strict_total,
        requests_relaxed=total - strict_total,
        violations_total=viol_total,
        violations_strict=viol_strict,
        violations_relaxed=viol_total - viol_strict,
        slo_violation_pct=(100.0 * viol_total / total) if total else 0.0,
        response_mean_ms=(float(ordered.sum()) / total) if total else 0.0,
        response_p95_ms=_percentile(ordered, 95.0),
        response_p99_ms=_percentile(ordered, 99.0),
        response_max_ms=float(ordered[-1]) if total else 0.0,
        total_cost=(vm_total + sl_total).quantize(Decimal("1E-12")),
        vm_cost=vm_total,
        serverless_cost=sl_total,
        vm_seconds_provisioned=vm_seconds,
        vm_instances=instances,
        serverless_invocations=invocations,
        serverless_cold_starts=cold_starts,
        serverless_ledger=sl_ledger,
        warnings=warnings,
        utilization=util_series,
        rate_card=card.to_dict(),
        ledger=sorted(records, key=lambda r: r[0]) if records is not None else None,
        _responses=responses,
    )


def merge_reports(parts: Sequence[MetricsReport], *, trace_hash: str, config_hash: str) -> MetricsReport:
    """Compose parallel per-model runs of one workload into a single report."""
    if not parts:
        raise ValidationError("nothing to merge")
    if len(parts) == 1:
        base = parts[0]
        base.trace_hash = trace_hash
        base.config_hash = config_hash
        return base
    for p in parts:
        if p._responses is None:
            raise ValidationError("can only merge freshly produced reports")
    responses: list[float] = []
    for p in parts:
        responses.extend(p._responses)
    ordered = np.sort(np.asarray(responses, dtype=np.float64))
    total = int(ordered.size)
    util: dict[float, list[float]] = {}
    for p in parts:
        for t_s, busy, slots in p.utilization:
            row = util.setdefault(t_s, [0.0, 0])
            row[0] += busy
            row[1] += slots
    ledger = None
    if all(p.ledger is not None for p in parts):
        ledger = sorted((row for p in parts for row in p.ledger), key=lambda r: r[0])
    vm_total = sum((p.vm_cost for p in parts), ZERO_MONEY)
    sl_total = sum((p.serverless_cost for p in parts), ZERO_MONEY)
    viol_total = sum(p.violations_total for p in parts)
    viol_strict = sum(p.violations_strict for p in parts)
    warnings: dict[str, int] = {}
    for p in parts:
        for k, v in p.warnings.items():
            warnings[k] = warnings.get(k, 0) + v
    return MetricsReport(
        policy=parts[0].policy,
        vm_type=parts[0].vm_type,
        model_names=sorted({m for p in parts for m in p.model_names}),
        seed=parts[0].seed,
        config_hash=config_hash,
        trace_hash=trace_hash,
        requests_total=total,
        requests_strict=sum(p.requests_strict for p in parts),
        requests_relaxed=sum(p.requests_relaxed for p in parts),
        violations_total=viol_total,
        violations_strict=viol_strict,
        violations_relaxed=viol_total - viol_strict,
        slo_violation_pct=(100.0 * viol_total / total) if total else 0.0,
        response_mean_ms=(float(ordered.sum()) / total) if total else 0.0,
        response_p95_ms=_percentile(ordered, 95.0),
        response_p99_ms=_percentile(ordered, 99.0),
        response_max_ms=float(ordered[-1]) if total else 0.0,
        total_cost=(vm_total + sl_total).quantize(Decimal("1E-12")),
        vm_cost=vm_total,
        serverless_cost=sl_total,
        vm_seconds_provisioned=sum(p.vm_seconds_provisioned for p in parts),
        vm_instances=[inst for p in parts for inst in p.vm_instances],
        serverless_invocations=sum(p.serverless_invocations for p in parts),
        serverless_cold_starts=sum(p.serverless_cold_starts for p in parts),
        serverless_ledger=[row for p in parts for row in p.serverless_ledger],
        warnings=warnings,
        utilization=[[t, round(busy, 6), slots] for t, (busy, slots) in sorted(util.items())],
        rate_card=parts[0].rate_card,
        ledger=ledger,
        _responses=responses,
    )


def over_provision_ratio(report: MetricsReport, baseline: MetricsReport) -> float:
    """Provisioned VM-seconds relative to a baseline run of the same trace."""
    if report.trace_hash != baseline.trace_hash:
        raise ComparisonError("reports come from different traces (trace hash mismatch)")
    if baseline.vm_seconds_provisioned <= 0:
        raise ComparisonError("baseline provisioned no VM-seconds; ratio undefined")
    return report.vm_seconds_provisioned / baseline.vm_seconds_provisioned


def replay_verify(report: MetricsReport, card: RateCard | None = None) -> bool:
    """Recompute costs from the report's ledgers and compare exactly.

    VM cost is re-accumulated from instance lifetimes, serverless cost from the
    invocation ledger, using only cloudmodel operations.
    """
    if report.vm_instances is None or report.serverless_ledger is None:
        raise VerificationError("report carries no ledgers to verify")
    if card is None:
        card = RateCard.from_dict(report.rate_card)
    vm_total = ZERO_MONEY
    for inst in report.vm_instances:
        billed = max(0.0, (inst["terminate_ms"] - inst["launch_ms"]) / 1000.0)
        vm_total += vm_cost(billed, inst["vm_type"], card)
    sl_total = ZERO_MONEY
    for row in report.serverless_ledger:
        sl_total += row["count"] * serverless_invocation_cost(row["billed_ms"], row["memory_mb"], card)
    return vm_total == report.vm_cost and sl_total == report.serverless_cost
