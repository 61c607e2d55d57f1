"""Discrete-event simulation of a spot worker fleet.

One event loop and seeded random streams make a run fully reproducible:
the same scenario and seed always give the same trace, byte for byte.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, TextIO, Union

from .executor import STAGES, StageTimeModel, early_stop_fraction
from .perf import InstanceType, ScalingModel, align_duration
from .progress import EarlyStopPolicy
from .queue import (
    GIB,
    MAX_TASK_BYTES,
    MIN_TASK_BYTES,
    ConflictingCompletion,
    Ledger,
    LedgerRecord,
    Status,
    TaskSpec,
    WorkQueue,
)
from .worker import DEFAULT_RETRY_LIMIT, ResourceEnvelope, required_disk, required_memory

GB = 1e9
HOURS_PER_MONTH = 730.0

EVENT_KINDS = (
    "WorkerStart", "IndexLoaded", "TaskStart", "StageDone", "EarlyStop",
    "Interrupted", "TaskComplete", "TaskFailed", "WorkerStop",
)
TRACE_FIELDS = ("timestamp", "worker_id", "kind", "payload")
TIMELINE_FIELDS = ("t", "running_instances", "cumulative_completed")

# Trace rows carry microsecond resolution.
_TS_FORMAT = "{:.6f}"


class ScenarioError(ValueError):
    pass


# --------------------------------------------------------------------------
# Scenario


@dataclass
class Pricing:
    spot_discount: float = 0.55
    storage_price_gb_month: float = 0.08
    # Flat monthly charge per volume (provisioned throughput/IOPS).
    volume_extra_month: float = 0.0
    transfer_price_per_gb: float = 0.01
    disk_gib: float = 550.0


@dataclass
class InterruptionModel:
    poisson_rate_per_instance_hour: Optional[float] = None
    # (fleet slot, timestamp) pairs; hits whichever instance holds the slot.
    trace: list[tuple[int, float]] = field(default_factory=list)


DEFAULT_TISSUE_RATES = {
    "brain": 0.57, "liver": 0.62, "lung": 0.67, "heart": 0.72,
    "kidney": 0.77, "muscle": 0.82, "blood": 0.87,
}


@dataclass
class WorkloadModel:
    """Synthetic manifest: log-normal sizes clipped to the admission range,
    per-tissue mapping rates and a low-rate tail."""

    n_tasks: int = 1000
    median_bytes: float = 1.5e9
    sigma: float = 1.0
    min_bytes: int = MIN_TASK_BYTES
    max_bytes: int = MAX_TASK_BYTES
    tissue_rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_TISSUE_RATES))
    rate_std: float = 0.05
    low_rate_fraction: float = 0.05
    low_rate_mean: float = 0.12
    bytes_per_read: float = 80.0
    unknown_reads_fraction: float = 0.0
    sort_memory_outlier_fraction: float = 0.002


def generate_workload(model: WorkloadModel, seed: int) -> list[TaskSpec]:
    rng = random.Random(f"{seed}:workload")
    tissues = sorted(model.tissue_rates)
    mu = math.log(model.median_bytes)
    tasks = []
    for i in range(model.n_tasks):
        size = int(min(model.max_bytes, max(model.min_bytes, rng.lognormvariate(mu, model.sigma))))
        tissue = tissues[i % len(tissues)]
        if rng.random() < model.low_rate_fraction:
            rate = rng.gauss(model.low_rate_mean, 0.03)
        else:
            rate = rng.gauss(model.tissue_rates[tissue], model.rate_std)
        rate = min(1.0, max(0.0, rate))
        reads = None if rng.random() < model.unknown_reads_fraction else max(1, round(size / model.bytes_per_read))
        if rng.random() < model.sort_memory_outlier_fraction:
            sort_mem = rng.uniform(2.0, 20.5)
        else:
            sort_mem = rng.uniform(1.0, 2.0)
        tasks.append(TaskSpec(
            sra_id=f"SIM{i:06d}", compressed_size_bytes=size, expected_total_reads=reads,
            tissue=tissue, sort_memory_gib=round(sort_mem, 3), final_mapping_rate=round(rate, 4),
        ))
    return tasks


@dataclass
class SimScenario:
    fleet_size: int
    instance: InstanceType
    tasks: list[TaskSpec]
    interruption: InterruptionModel = field(default_factory=InterruptionModel)
    index_size_gib: float = 29.5
    server_bandwidth_gib_s: float = 1.756
    per_worker_bandwidth_gib_s: Optional[float] = None
    scaling: ScalingModel = field(default_factory=ScalingModel)
    pricing: Pricing = field(default_factory=Pricing)
    seed: int = 0
    stage_times: StageTimeModel = field(default_factory=StageTimeModel)
    policy: EarlyStopPolicy = field(default_factory=EarlyStopPolicy)
    envelope: ResourceEnvelope = field(default_factory=ResourceEnvelope)
    threads: int = 8
    base_throughput: float = 1.0e6
    start_stagger_seconds: float = 300.0
    replacement_delay_seconds: float = 180.0
    retry_limit: int = DEFAULT_RETRY_LIMIT
    failure_probability: float = 0.0
    noise_std: float = 0.02
    name: str = ""

    def validate(self) -> None:
        if self.fleet_size < 1:
            raise ScenarioError("fleet_size must be >= 1")
        if self.server_bandwidth_gib_s <= 0:
            raise ScenarioError("server_bandwidth_gib_s must be positive")
        if self.per_worker_bandwidth_gib_s is not None and self.per_worker_bandwidth_gib_s <= 0:
            raise ScenarioError("per_worker_bandwidth_gib_s must be positive")
        if self.index_size_gib <= 0:
            raise ScenarioError("index_size_gib must be positive")
        if self.threads < 1 or self.retry_limit < 1:
            raise ScenarioError("threads and retry_limit must be >= 1")
        if self.start_stagger_seconds < 0 or self.replacement_delay_seconds < 0:
            raise ScenarioError("delays must be non-negative")
        if not 0.0 <= self.failure_probability <= 1.0:
            raise ScenarioError("failure_probability must be in [0, 1]")
        if not 0.0 <= self.pricing.spot_discount < 1.0:
            raise ScenarioError("spot_discount must be in [0, 1)")
        rate = self.interruption.poisson_rate_per_instance_hour
        if rate is not None and rate < 0:
            raise ScenarioError("poisson rate must be non-negative")
        if rate and self.interruption.trace:
            raise ScenarioError("choose either a Poisson rate or an interruption trace")
        for slot, t in self.interruption.trace:
            if not 0 <= slot < self.fleet_size or t < 0:
                raise ScenarioError(f"bad interruption trace entry ({slot}, {t})")
        ids = [t.sra_id for t in self.tasks]
        if len(ids) != len(set(ids)):
            raise ScenarioError("duplicate sra_id in scenario tasks")


# --------------------------------------------------------------------------
# Trace


@dataclass(frozen=True)
class TraceEvent:
    timestamp: float
    worker_id: str
    kind: str
    payload: dict = field(default_factory=dict)


@dataclass
class FleetTrace:
    events: list[TraceEvent] = field(default_factory=list)

    def emit(self, timestamp: float, worker_id: str, kind: str, **payload) -> None:
        self.events.append(TraceEvent(timestamp, worker_id, kind, payload))

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def write_csv(self, fh: TextIO) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_FIELDS)
        for e in self.events:
            writer.writerow([_TS_FORMAT.format(e.timestamp), e.worker_id, e.kind,
                             json.dumps(e.payload, sort_keys=True, separators=(",", ":"))])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    @classmethod
    def read_csv(cls, fh: TextIO) -> "FleetTrace":
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_FIELDS:
            raise ValueError(f"trace header must be {','.join(TRACE_FIELDS)}")
        events = [TraceEvent(float(r["timestamp"]), r["worker_id"], r["kind"], json.loads(r["payload"]))
                  for r in reader]
        return cls(events)


def index_distribution_time(
    index_size_gib: float,
    concurrent_workers: int,
    server_bandwidth_gib_s: float,
    per_worker_cap: Optional[float] = None,
) -> float:
    """Seconds for *concurrent_workers* starting together to each pull the index."""
    if concurrent_workers <= 0:
        return 0.0
    if index_size_gib <= 0 or server_bandwidth_gib_s <= 0:
        raise ValueError("index size and bandwidth must be positive")
    rate = server_bandwidth_gib_s / concurrent_workers
    if per_worker_cap is not None:
        rate = min(rate, per_worker_cap)
    return index_size_gib / rate


# --------------------------------------------------------------------------
# Summary and cost


@dataclass
class CostBreakdown:
    compute: float = 0.0
    storage: float = 0.0
    transfer: float = 0.0
    total: float = 0.0
    per_file: float = 0.0


@dataclass
class SimSummary:
    node_hours: float
    files_completed: int
    files_failed: int
    early_stopped: int
    interruptions: int
    wasted_seconds: float
    wasted_fraction: float
    cost: CostBreakdown
    avg_mapping_rate: Optional[float]
    instances_started: int = 0
    makespan_seconds: float = 0.0
    init_phase_seconds: float = 0.0
    align_seconds: float = 0.0
    align_baseline_seconds: float = 0.0
    duplicate_completions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimSummary":
        data = dict(data)
        data["cost"] = CostBreakdown(**data["cost"])
        return cls(**data)


def instance_spans(trace: FleetTrace) -> dict[str, tuple[float, float]]:
    """(start, end) per worker instance; an instance still up at the end of
    the trace is closed at the last event time."""
    starts: dict[str, float] = {}
    ends: dict[str, float] = {}
    last = trace.events[-1].timestamp if trace.events else 0.0
    for e in trace.events:
        if e.kind == "WorkerStart":
            starts[e.worker_id] = e.timestamp
        elif e.kind in ("WorkerStop", "Interrupted"):
            ends[e.worker_id] = e.timestamp
    return {w: (s, ends.get(w, last)) for w, s in starts.items()}


def cost_of(
    trace: FleetTrace,
    pricing: Pricing,
    price_per_hour: float,
    index_size_gib: float,
    disk_gib: Optional[float] = None,
) -> CostBreakdown:
    """Compute, storage and transfer cost of a finished trace.

    Every instance start pays one cross-zone index transfer.  Storage is
    billed per instance for as long as the instance runs.
    """
    disk = pricing.disk_gib if disk_gib is None else disk_gib
    spans = instance_spans(trace)
    hours = sum(end - start for start, end in spans.values()) / 3600.0
    compute = hours * price_per_hour * (1.0 - pricing.spot_discount)
    storage = (disk * pricing.storage_price_gb_month + pricing.volume_extra_month) * hours / HOURS_PER_MONTH
    transfer = index_size_gib * GIB / GB * pricing.transfer_price_per_gb * len(spans)
    total = compute + storage + transfer
    files = len(trace.of_kind("TaskComplete"))
    return CostBreakdown(compute, storage, transfer, total, total / files if files else 0.0)


def emit_timeline(trace: FleetTrace, bucket_seconds: float) -> list[tuple[float, int, int]]:
    """Sample running instances and cumulative completions at bucket edges.

    The state at edge ``t`` includes every event stamped at or before ``t``.
    """
    if bucket_seconds <= 0:
        raise ValueError("bucket_seconds must be positive")
    if not trace.events:
        return []
    end = trace.events[-1].timestamp
    n_buckets = math.ceil(end / bucket_seconds - 1e-12)
    rows = []
    running = completed = 0
    i = 0
    events = trace.events
    for k in range(n_buckets + 1):
        t = k * bucket_seconds
        while i < len(events) and events[i].timestamp <= t:
            kind = events[i].kind
            if kind == "WorkerStart":
                running += 1
            elif kind in ("WorkerStop", "Interrupted"):
                running -= 1
            elif kind == "TaskComplete":
                completed += 1
            i += 1
        rows.append((t, running, completed))
    return rows


def write_timeline_csv(rows: Iterable[tuple[float, int, int]], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(TIMELINE_FIELDS)
    for t, running, done in rows:
        writer.writerow([_TS_FORMAT.format(t), running, done])


def read_timeline_csv(fh: TextIO) -> list[tuple[float, int, int]]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != TIMELINE_FIELDS:
        raise ValueError(f"timeline header must be {','.join(TIMELINE_FIELDS)}")
    return [(float(r["t"]), int(r["running_instances"]), int(r["cumulative_completed"])) for r in reader]


# --------------------------------------------------------------------------
# Simulation


@dataclass
class _Plan:
    stages: list[tuple[str, float]]
    early: bool
    rate: Optional[float]
    full_align: float
    failure: Optional[str] = None
    retryable: bool = True


@dataclass
class _Instance:
    wid: str
    slot: int
    gen: int
    start: float
    state: str = "loading"
    load_start: float = 0.0
    msg: object = None
    task_start: float = 0.0
    plan: Optional[_Plan] = None
    stage_idx: int = 0
    version: int = 0


class _FleetSim:
    def __init__(self, sc: SimScenario) -> None:
        sc.validate()
        self.sc = sc
        self.trace = FleetTrace()
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()
        self.queue = WorkQueue("sim", clock=lambda: self.now)
        self.ledger = Ledger()
        self.instances: dict[str, _Instance] = {}
        self.slot_holder: dict[int, str] = {}
        self.loaders: dict[str, float] = {}
        self._load_mark = 0.0
        self._load_epoch = 0
        self.rng_start = random.Random(f"{sc.seed}:start")
        self.rng_interrupt = random.Random(f"{sc.seed}:interrupt")
        self.interruptions = 0
        self.wasted_seconds = 0.0
        self.duplicates = 0
        self.align_seconds = 0.0
        self.align_baseline = 0.0
        self._full_align: dict[str, float] = {}

    # event plumbing ----------------------------------------------------------

    def push(self, t: float, kind: str, *args) -> None:
        heapq.heappush(self._heap, (t, next(self._seq), kind, args))

    def run(self) -> FleetTrace:
        for task in self.sc.tasks:
            self.queue.enqueue(task, now=0.0)
        for slot in range(self.sc.fleet_size):
            delay = self.rng_start.uniform(0.0, self.sc.start_stagger_seconds) if self.sc.start_stagger_seconds else 0.0
            self.push(delay, "start", slot, 0, None)
        for slot, t in sorted(self.sc.interruption.trace, key=lambda x: (x[1], x[0])):
            self.push(float(t), "interrupt_slot", slot)
        while self._heap:
            t, _, kind, args = heapq.heappop(self._heap)
            self.now = t
            getattr(self, f"_on_{kind}")(*args)
        return self.trace

    # index loading under shared bandwidth -------------------------------------

    def _load_rate(self) -> float:
        rate = self.sc.server_bandwidth_gib_s / len(self.loaders)
        cap = self.sc.per_worker_bandwidth_gib_s
        return min(rate, cap) if cap is not None else rate

    def _advance_loaders(self) -> None:
        if self.loaders:
            moved = self._load_rate() * (self.now - self._load_mark)
            for wid in self.loaders:
                self.loaders[wid] -= moved
        self._load_mark = self.now

    def _reschedule_loaders(self) -> None:
        self._load_epoch += 1
        if self.loaders:
            remaining = min(self.loaders.values())
            self.push(self.now + max(0.0, remaining) / self._load_rate(), "load_done", self._load_epoch)

    def _on_load_done(self, epoch: int) -> None:
        if epoch != self._load_epoch:
            return
        self._advance_loaders()
        eps = 1e-9 * self.sc.index_size_gib
        done = sorted(w for w, rem in self.loaders.items() if rem <= eps)
        for wid in done:
            del self.loaders[wid]
        self._reschedule_loaders()
        for wid in done:
            inst = self.instances[wid]
            inst.state = "polling"
            self.trace.emit(self.now, wid, "IndexLoaded", seconds=self.now - inst.load_start)
            self._next_task(inst)

    # worker lifecycle -----------------------------------------------------------

    def _on_start(self, slot: int, gen: int, replaces: Optional[str]) -> None:
        wid = f"w{slot:03d}.{gen}"
        inst = _Instance(wid, slot, gen, start=self.now, load_start=self.now)
        self.instances[wid] = inst
        self.slot_holder[slot] = wid
        self.trace.emit(self.now, wid, "WorkerStart", slot=slot, generation=gen, replaces=replaces)
        self._advance_loaders()
        self.loaders[wid] = self.sc.index_size_gib
        self._reschedule_loaders()
        rate = self.sc.interruption.poisson_rate_per_instance_hour
        if rate:
            self.push(self.now + self.rng_interrupt.expovariate(rate / 3600.0), "interrupt_instance", wid)

    def _stop(self, inst: _Instance) -> None:
        inst.state = "stopped"
        inst.version += 1
        self.trace.emit(self.now, inst.wid, "WorkerStop")

    def _next_task(self, inst: _Instance) -> None:
        while True:
            msg = self.queue.lease(1e12, now=self.now)
            if msg is None:
                self._stop(inst)
                return
            if self.ledger.already_processed(msg.task.sra_id):
                self.queue.ack(msg.receipt, now=self.now)
                continue
            break
        inst.state = "busy"
        inst.msg = msg
        inst.task_start = self.now
        inst.stage_idx = 0
        inst.version += 1
        inst.plan = self._plan(msg.task, msg.attempt)
        self.trace.emit(self.now, inst.wid, "TaskStart", sra_id=msg.task.sra_id, attempt=msg.attempt)
        self.ledger.record(LedgerRecord(msg.task.sra_id, Status.IN_PROGRESS, inst.wid, attempt=msg.attempt))
        self._schedule_stage(inst)

    def _plan(self, task: TaskSpec, attempt: int) -> _Plan:
        sc = self.sc
        full = self._full_align.get(task.sra_id)
        if full is None:
            full = align_duration(sc.scaling, max(task.compressed_size_bytes, 1), sc.threads, sc.base_throughput)
            self._full_align[task.sra_id] = full
        if required_disk(task, sc.envelope) > sc.envelope.disk_capacity_gib:
            return _Plan([], False, None, full, failure="DiskAdmissionRejected")
        stages = [(s, sc.stage_times.seconds(s, task.compressed_size_bytes, full)) for s in STAGES[:2]]
        if required_memory(task, sc.envelope) > sc.envelope.ram_gib:
            return _Plan(stages, False, None, full, failure="OutOfMemorySort")
        decision, consumed, rate = early_stop_fraction(task, full, sc.policy, sc.seed, sc.noise_std)
        stages.append(("Align", full * consumed))
        if sc.failure_probability:
            draw = random.Random(f"{sc.seed}:fail:{task.sra_id}:{attempt}").random()
            if draw < sc.failure_probability:
                return _Plan(stages, False, rate, full, failure="ExecutorFailure")
        if decision.terminate:
            return _Plan(stages, True, rate, full)
        stages += [(s, sc.stage_times.seconds(s, task.compressed_size_bytes, full)) for s in STAGES[3:]]
        return _Plan(stages, False, rate, full)

    def _schedule_stage(self, inst: _Instance) -> None:
        plan = inst.plan
        if inst.stage_idx < len(plan.stages):
            _, seconds = plan.stages[inst.stage_idx]
            self.push(self.now + seconds, "stage_done", inst.wid, inst.version)
        else:
            self.push(self.now, "finish", inst.wid, inst.version)

    def _on_finish(self, wid: str, version: int) -> None:
        inst = self.instances[wid]
        if inst.version != version or inst.state != "busy":
            return
        if inst.plan.failure:
            self._fail_task(inst)
        else:
            self._complete_task(inst)

    def _on_stage_done(self, wid: str, version: int) -> None:
        inst = self.instances[wid]
        if inst.version != version or inst.state != "busy":
            return
        stage, seconds = inst.plan.stages[inst.stage_idx]
        self.trace.emit(self.now, wid, "StageDone", sra_id=inst.msg.task.sra_id, stage=stage, seconds=seconds)
        if stage == "Align":
            self.align_seconds += seconds
        inst.stage_idx += 1
        self._schedule_stage(inst)

    def _timings(self, inst: _Instance) -> dict[str, float]:
        return dict(inst.plan.stages[:inst.stage_idx])

    def _complete_task(self, inst: _Instance) -> None:
        task, plan = inst.msg.task, inst.plan
        if plan.early:
            self.trace.emit(self.now, inst.wid, "EarlyStop", sra_id=task.sra_id, mapping_rate=plan.rate)
        try:
            self.ledger.record(LedgerRecord(task.sra_id, Status.COMPLETED, inst.wid, self._timings(inst),
                                            final_mapping_rate=plan.rate, attempt=inst.msg.attempt,
                                            terminated_early=plan.early))
        except ConflictingCompletion:
            self.duplicates += 1
        self.align_baseline += plan.full_align
        self.queue.ack(inst.msg.receipt, now=self.now)
        self.trace.emit(self.now, inst.wid, "TaskComplete", sra_id=task.sra_id, terminated_early=plan.early)
        inst.msg = None
        self._next_task(inst)

    def _fail_task(self, inst: _Instance) -> None:
        task, msg, plan = inst.msg.task, inst.msg, inst.plan
        final = not plan.retryable or msg.attempt >= self.sc.retry_limit
        self.ledger.record(LedgerRecord(task.sra_id, Status.FAILED, inst.wid, self._timings(inst),
                                        attempt=msg.attempt))
        self.trace.emit(self.now, inst.wid, "TaskFailed", sra_id=task.sra_id, reason=plan.failure,
                        attempt=msg.attempt, final=final)
        if final:
            self.queue.ack(msg.receipt, now=self.now)
        else:
            self.queue.nack(msg.receipt, now=self.now)
        inst.msg = None
        self._next_task(inst)

    # interruptions ----------------------------------------------------------------

    def _on_interrupt_slot(self, slot: int) -> None:
        wid = self.slot_holder.get(slot)
        if wid is not None:
            self._interrupt(self.instances[wid])

    def _on_interrupt_instance(self, wid: str) -> None:
        self._interrupt(self.instances[wid])

    def _interrupt(self, inst: _Instance) -> None:
        if inst.state == "stopped":
            return
        phase = inst.state
        sra_id = None
        if phase == "busy":
            wasted = self.now - inst.task_start
            sra_id = inst.msg.task.sra_id
            self.queue.nack(inst.msg.receipt, now=self.now)
            inst.msg = None
        elif phase == "loading":
            wasted = self.now - inst.load_start
            self._advance_loaders()
            del self.loaders[inst.wid]
            self._reschedule_loaders()
        else:
            wasted = 0.0
        inst.state = "stopped"
        inst.version += 1
        self.interruptions += 1
        self.wasted_seconds += wasted
        self.trace.emit(self.now, inst.wid, "Interrupted", phase=phase, sra_id=sra_id, wasted=wasted)
        if len(self.queue):
            self.push(self.now + self.sc.replacement_delay_seconds, "start", inst.slot, inst.gen + 1, inst.wid)

    # summary --------------------------------------------------------------------------

    def summary(self) -> SimSummary:
        sc = self.sc
        spans = instance_spans(self.trace)
        total_seconds = sum(e - s for s, e in spans.values())
        replacement_loads = sum(
            e.payload["seconds"] for e in self.trace.of_kind("IndexLoaded")
            if self.instances[e.worker_id].gen > 0
        )
        wasted = self.wasted_seconds + replacement_loads
        latest = self.ledger.latest_records()
        completed = [r for r in latest.values() if r.status is Status.COMPLETED]
        failed = [r for r in latest.values() if r.status is Status.FAILED]
        rates = [r.final_mapping_rate for r in completed if r.final_mapping_rate is not None]
        initial_loaded = [e.timestamp for e in self.trace.of_kind("IndexLoaded")
                          if self.instances[e.worker_id].gen == 0]
        initial_starts = [e.timestamp for e in self.trace.of_kind("WorkerStart")
                          if e.payload["generation"] == 0]
        init_phase = max(initial_loaded) - min(initial_starts) if initial_loaded else 0.0
        cost = cost_of(self.trace, sc.pricing, sc.instance.on_demand_price_per_hour, sc.index_size_gib)
        return SimSummary(
            node_hours=total_seconds / 3600.0,
            files_completed=len(completed),
            files_failed=len(failed),
            early_stopped=sum(r.terminated_early for r in completed),
            interruptions=self.interruptions,
            wasted_seconds=wasted,
            wasted_fraction=wasted / total_seconds if total_seconds else 0.0,
            cost=cost,
            avg_mapping_rate=sum(rates) / len(rates) if rates else None,
            instances_started=len(spans),
            makespan_seconds=self.trace.events[-1].timestamp if self.trace.events else 0.0,
            init_phase_seconds=init_phase,
            align_seconds=self.align_seconds,
            align_baseline_seconds=self.align_baseline,
            duplicate_completions=self.duplicates + self.ledger.duplicate_completions,
        )


def simulate(scenario: SimScenario) -> tuple[FleetTrace, SimSummary]:
    trace, summary, _ = simulate_with_ledger(scenario)
    return trace, summary


def simulate_with_ledger(scenario: SimScenario) -> tuple[FleetTrace, SimSummary, Ledger]:
    """Like :func:`simulate` but also hands back the ledger the fleet wrote."""
    sim = _FleetSim(scenario)
    trace = sim.run()
    return trace, sim.summary(), sim.ledger


# --------------------------------------------------------------------------
# Scenario files


def _load_toml(path: Union[str, Path]) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def scenario_from_dict(data: dict, base_dir: Union[str, Path, None] = None) -> SimScenario:
    """Build a scenario from the documented key set (see README)."""
    from .queue import read_manifest

    data = dict(data)
    try:
        inst = data.pop("instance")
        instance = InstanceType(
            name=inst["name"], vcpus=int(inst["vcpus"]), physical_cores=int(inst["cores"]),
            ram_gib=float(inst["ram_gib"]), on_demand_price_per_hour=float(inst["price_per_hour"]),
        )
        seed = int(data.pop("seed"))
        workload = data.pop("workload", {})
        if "manifest" in workload:
            path = Path(workload["manifest"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            tasks = read_manifest(path)
        else:
            tasks = generate_workload(WorkloadModel(**workload), seed)
        intr = data.pop("interruption", {})
        interruption = InterruptionModel(
            poisson_rate_per_instance_hour=intr.get("poisson_rate_per_instance_hour"),
            trace=[(int(s), float(t)) for s, t in intr.get("trace", [])],
        )
        scaling = ScalingModel(**data.pop("scaling", {}))
        pricing = Pricing(**data.pop("pricing", {}))
        stage_times = StageTimeModel(**data.pop("stages", {}))
        policy = EarlyStopPolicy(**data.pop("early_stop", {}))
        envelope = ResourceEnvelope(**data.pop("envelope", {"ram_gib": instance.ram_gib}))
        scenario = SimScenario(
            instance=instance, tasks=tasks, interruption=interruption, scaling=scaling,
            pricing=pricing, seed=seed, stage_times=stage_times, policy=policy,
            envelope=envelope, **data,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad scenario: {exc!r}") from None
    scenario.validate()
    return scenario


def load_scenario(path: Union[str, Path], seed: Optional[int] = None) -> SimScenario:
    data = _load_toml(path)
    if seed is not None:
        data["seed"] = seed
    return scenario_from_dict(data, base_dir=Path(path).parent)


def write_outputs(out_dir: Union[str, Path], trace: FleetTrace, summary: SimSummary,
                  bucket_seconds: float = 300.0) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.csv", "timeline": out / "timeline.csv", "summary": out / "summary.json"}
    with open(paths["trace"], "w", newline="", encoding="utf-8") as fh:
        trace.write_csv(fh)
    with open(paths["timeline"], "w", newline="", encoding="utf-8") as fh:
        write_timeline_csv(emit_timeline(trace, bucket_seconds), fh)
    with open(paths["summary"], "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return paths


def read_summary(path: Union[str, Path]) -> SimSummary:
    with open(path, encoding="utf-8") as fh:
        return SimSummary.from_dict(json.load(fh))
