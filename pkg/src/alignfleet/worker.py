"""Worker state machine: load the index, lease tasks, run the pipeline stages."""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence

from .executor import (
    STAGES,
    OutOfMemorySort,
    StageContext,
    StageError,
    StageInterrupted,
    StageOutcome,
)
from .progress import EarlyStopPolicy
from .queue import (
    GIB,
    QUEUE_LARGE,
    QUEUE_MAIN,
    QUEUE_SMALL,
    ConflictingCompletion,
    Ledger,
    LedgerRecord,
    QueueError,
    QueueMessage,
    Status,
    TaskSpec,
    WorkQueue,
)

log = logging.getLogger(__name__)

DEFAULT_RETRY_LIMIT = 3
INTERRUPTION_NOTICE_SECONDS = 120.0


class Phase(str, Enum):
    PROVISIONING = "Provisioning"
    LOADING_INDEX = "LoadingIndex"
    POLLING = "Polling"
    PREFETCH = "Prefetch"
    CONVERT = "Convert"
    ALIGN = "Align"
    SORT_NORMALIZE = "SortNormalize"
    UPLOAD = "Upload"
    DRAINING = "Draining"
    TERMINATED = "Terminated"


STAGE_PHASES = {Phase(s) for s in STAGES}

_NEXT = {
    Phase.PROVISIONING: {Phase.LOADING_INDEX},
    Phase.LOADING_INDEX: {Phase.POLLING},
    Phase.POLLING: {Phase.PREFETCH, Phase.TERMINATED},
    Phase.PREFETCH: {Phase.CONVERT, Phase.POLLING},
    Phase.CONVERT: {Phase.ALIGN, Phase.POLLING},
    Phase.ALIGN: {Phase.SORT_NORMALIZE, Phase.POLLING},
    Phase.SORT_NORMALIZE: {Phase.UPLOAD, Phase.POLLING},
    Phase.UPLOAD: {Phase.POLLING},
    Phase.DRAINING: {Phase.TERMINATED},
    Phase.TERMINATED: set(),
}


class IllegalTransition(RuntimeError):
    pass


@dataclass
class WorkerState:
    phase: Phase = Phase.PROVISIONING
    current_task: Optional[TaskSpec] = None
    index_loaded: bool = False

    def advance(self, phase: Phase) -> None:
        allowed = _NEXT[self.phase]
        if self.phase is not Phase.TERMINATED and phase is Phase.DRAINING:
            allowed = allowed | {Phase.DRAINING}
        if phase not in allowed:
            raise IllegalTransition(f"{self.phase.value} -> {phase.value}")
        if phase in STAGE_PHASES and self.current_task is None:
            raise IllegalTransition(f"{phase.value} without a current task")
        if phase is Phase.ALIGN and not self.index_loaded:
            raise IllegalTransition("Align before the index is loaded")
        self.phase = phase


@dataclass(frozen=True)
class ResourceEnvelope:
    disk_capacity_gib: float = 550.0
    ram_gib: float = 64.0
    index_size_gib: float = 29.5
    fastq_expansion_default: float = 7.5
    fastq_expansion_max: float = 17.0
    sort_memory_default_gib: float = 2.0
    sort_memory_max_gib: float = 20.5

    def __post_init__(self) -> None:
        for name, value in vars(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive")
        if self.fastq_expansion_max < self.fastq_expansion_default:
            raise ValueError("fastq_expansion_max must be >= fastq_expansion_default")


def required_disk(task: TaskSpec, envelope: ResourceEnvelope) -> float:
    """GiB of scratch disk: SRA + FASTQ + BAM, with the BAM bounded by the FASTQ."""
    expansion = task.fastq_expansion_factor or envelope.fastq_expansion_default
    sra = task.compressed_size_bytes / GIB
    fastq = expansion * sra
    return sra + fastq + fastq


def required_memory(task: TaskSpec, envelope: ResourceEnvelope) -> float:
    sort = task.sort_memory_gib if task.sort_memory_gib is not None else envelope.sort_memory_default_gib
    return envelope.index_size_gib + sort


class DiskAdmissionRejected(StageError):
    pass


class Executor(Protocol):
    def run_stage(self, stage: str, task: TaskSpec, ctx: StageContext) -> StageOutcome: ...


@dataclass
class WorkerReport:
    worker_id: str
    tasks_completed: int = 0
    tasks_failed: int = 0
    tasks_terminated_early: int = 0
    tasks_skipped: int = 0
    tasks_retried: int = 0
    disk_rejections: int = 0
    duplicate_completions: int = 0
    stage_seconds: dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    index_load_seconds: float = 0.0
    wasted_seconds: float = 0.0
    interrupted: bool = False

    def to_dict(self) -> dict:
        return {
            "worker_id": self.worker_id,
            "tasks_completed": self.tasks_completed,
            "tasks_failed": self.tasks_failed,
            "tasks_terminated_early": self.tasks_terminated_early,
            "tasks_skipped": self.tasks_skipped,
            "tasks_retried": self.tasks_retried,
            "disk_rejections": self.disk_rejections,
            "duplicate_completions": self.duplicate_completions,
            "stage_seconds": dict(self.stage_seconds),
            "index_load_seconds": self.index_load_seconds,
            "wasted_seconds": self.wasted_seconds,
            "interrupted": self.interrupted,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorkerReport":
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


class Worker:
    """One pipeline worker.

    :meth:`run` blocks in the calling thread.  :meth:`handle_interruption`
    may be called from any thread; the current lease is returned to its
    queue, scratch files are removed and the worker terminates.
    """

    def __init__(
        self,
        worker_id: str,
        queues: Mapping[str, WorkQueue],
        ledger: Ledger,
        executor: Executor,
        policy: EarlyStopPolicy = EarlyStopPolicy(),
        envelope: ResourceEnvelope = ResourceEnvelope(),
        clock: Callable[[], float] = time.time,
        *,
        queue_order: Optional[Sequence[str]] = None,
        threads: int = 8,
        retry_limit: int = DEFAULT_RETRY_LIMIT,
        visibility_seconds: float = 3600.0,
        workdir_root: Optional[Path] = None,
        index_dir: str = "",
        index_loader: Optional[Callable[[], float]] = None,
        heartbeat: bool = False,
        sleep: Callable[[float], None] = time.sleep,
        idle_poll_seconds: float = 1.0,
    ) -> None:
        if retry_limit < 1:
            raise ValueError("retry_limit must be >= 1")
        self.worker_id = worker_id
        self.queues = dict(queues)
        self.queue_order = list(queue_order) if queue_order else self._default_order()
        self.ledger = ledger
        self.executor = executor
        self.policy = policy
        self.envelope = envelope
        self.clock = clock
        self.threads = threads
        self.retry_limit = retry_limit
        self.visibility_seconds = visibility_seconds
        self.workdir_root = Path(workdir_root) if workdir_root else Path(tempfile.gettempdir()) / "alignfleet"
        self.index_dir = index_dir
        self.index_loader = index_loader
        self.heartbeat = heartbeat
        self.sleep = sleep
        self.idle_poll_seconds = idle_poll_seconds

        self.state = WorkerState()
        self.report = WorkerReport(worker_id)
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._drained = threading.Event()
        self._lease: Optional[tuple[str, QueueMessage]] = None
        self._run_thread: Optional[threading.Thread] = None

    def _default_order(self) -> list[str]:
        order = [q for q in (QUEUE_MAIN, QUEUE_SMALL, QUEUE_LARGE) if q in self.queues]
        return order + sorted(set(self.queues) - set(order))

    @property
    def double_queue(self) -> bool:
        return QUEUE_SMALL in self.queues and QUEUE_LARGE in self.queues

    @property
    def interrupted(self) -> bool:
        return self._stop.is_set()

    # lifecycle -------------------------------------------------------------

    def load_index(self) -> None:
        self.state.advance(Phase.LOADING_INDEX)
        seconds = self.index_loader() if self.index_loader else 0.0
        self.report.index_load_seconds += seconds
        self.state.index_loaded = True
        self.state.advance(Phase.POLLING)

    def run(self, drain: Optional[threading.Event] = None) -> WorkerReport:
        """Process tasks until the queues are empty (and *drain* is set, if given)."""
        self._run_thread = threading.current_thread()
        if self.state.phase is Phase.PROVISIONING and not self.interrupted:
            self.load_index()
        while not self.interrupted:
            leased = self._lease_next()
            if leased is None:
                pending = any(len(self.queues[qid]) for qid in self.queue_order)
                if not pending and (drain is None or drain.is_set()):
                    break
                self.sleep(self.idle_poll_seconds)
                continue
            self._process(*leased)
        with self._lock:
            if self.state.phase is Phase.POLLING:
                self.state.advance(Phase.TERMINATED)
        return self.report

    def _lease_next(self) -> Optional[tuple[str, QueueMessage]]:
        for qid in self.queue_order:
            msg = self.queues[qid].lease(self.visibility_seconds, now=self.clock())
            if msg is not None:
                return qid, msg
        return None

    # task processing -------------------------------------------------------

    def _estimate_seconds(self, task: TaskSpec) -> Optional[float]:
        estimator = getattr(self.executor, "estimate_task_seconds", None)
        return estimator(task, self.threads) if estimator else None

    def _extend(self, seconds: float) -> None:
        with self._lock:
            if self._lease is None:
                return
            qid, msg = self._lease
            try:
                self.queues[qid].extend(msg.receipt, seconds, now=self.clock())
            except QueueError as exc:
                log.warning("%s: could not extend lease on %s: %s", self.worker_id, msg.task.sra_id, exc)

    def _settle(self, action: str) -> None:
        """Ack or nack the held lease and forget it."""
        with self._lock:
            if self._lease is None:
                return
            qid, msg = self._lease
            self._lease = None
            try:
                getattr(self.queues[qid], action)(msg.receipt, now=self.clock())
            except QueueError as exc:
                log.warning("%s: %s on %s failed: %s", self.worker_id, action, msg.task.sra_id, exc)

    def _record(self, rec: LedgerRecord) -> None:
        try:
            self.ledger.record(rec)
        except ConflictingCompletion:
            self.report.duplicate_completions += 1

    def _process(self, qid: str, msg: QueueMessage) -> None:
        task = msg.task
        if self.ledger.already_processed(task.sra_id):
            with self._lock:
                self._lease = (qid, msg)
            self._settle("ack")
            self.report.tasks_skipped += 1
            return
        with self._lock:
            if self.interrupted:
                # Interrupted between lease and start; give the task back.
                self._lease = (qid, msg)
                self._settle("nack")
                return
            self._lease = (qid, msg)
            self.state.current_task = task

        estimate = self._estimate_seconds(task)
        visibility = 2 * estimate if estimate else self.visibility_seconds
        self._extend(visibility)
        beat = _Heartbeat(self, visibility) if self.heartbeat else None

        workdir = self.workdir_root / task.sra_id
        ctx = StageContext(workdir=workdir, threads=self.threads, index_dir=self.index_dir,
                           policy=self.policy, stop=self._stop)
        timings: dict[str, float] = {}
        elapsed = 0.0
        rate = None
        early = False
        self._record(LedgerRecord(task.sra_id, Status.IN_PROGRESS, self.worker_id, attempt=msg.attempt))
        try:
            if required_disk(task, self.envelope) > self.envelope.disk_capacity_gib:
                raise DiskAdmissionRejected(
                    f"{task.sra_id} needs {required_disk(task, self.envelope):.1f} GiB of disk")
            workdir.mkdir(parents=True, exist_ok=True)
            for stage in STAGES:
                if self.interrupted:
                    raise StageInterrupted(0.0)
                with self._lock:
                    self.state.advance(Phase(stage))
                if stage == "Align" and required_memory(task, self.envelope) > self.envelope.ram_gib:
                    raise OutOfMemorySort(
                        f"{task.sra_id} needs {required_memory(task, self.envelope):.1f} GiB RAM")
                if beat is None:
                    self._extend(visibility)
                outcome = self.executor.run_stage(stage, task, ctx)
                timings[stage] = outcome.seconds
                elapsed += outcome.seconds
                self.report.stage_seconds[stage] += outcome.seconds
                if stage == "Align":
                    rate = outcome.final_mapping_rate
                    if outcome.terminated_early:
                        early = True
                        break
        except StageInterrupted as exc:
            self._drain(elapsed + exc.partial_seconds)
            return
        except DiskAdmissionRejected as exc:
            self.report.disk_rejections += 1
            if self.double_queue and qid != QUEUE_LARGE:
                log.info("%s: %s; moving to the large queue", self.worker_id, exc)
                self.queues[QUEUE_LARGE].enqueue(task, now=self.clock())
                self._settle("ack")
            else:
                self._fail(task, msg, exc, timings)
            self._back_to_polling(workdir)
            return
        except StageError as exc:
            self._fail(task, msg, exc, timings)
            self._back_to_polling(workdir)
            return
        finally:
            if beat is not None:
                beat.stop()

        self._record(LedgerRecord(task.sra_id, Status.COMPLETED, self.worker_id, timings,
                                  final_mapping_rate=rate, attempt=msg.attempt,
                                  terminated_early=early))
        self._settle("ack")
        self.report.tasks_completed += 1
        self.report.tasks_terminated_early += early
        self._back_to_polling(workdir)

    def _fail(self, task: TaskSpec, msg: QueueMessage, exc: StageError, timings: dict) -> None:
        self._record(LedgerRecord(task.sra_id, Status.FAILED, self.worker_id, timings, attempt=msg.attempt))
        if exc.retryable and msg.attempt < self.retry_limit:
            log.info("%s: %s attempt %d failed (%s); requeued", self.worker_id, task.sra_id, msg.attempt, exc)
            self.report.tasks_retried += 1
            self._settle("nack")
        else:
            log.warning("%s: %s failed permanently: %s", self.worker_id, task.sra_id, exc)
            self.report.tasks_failed += 1
            self._settle("ack")

    def _back_to_polling(self, workdir: Path) -> None:
        shutil.rmtree(workdir, ignore_errors=True)
        with self._lock:
            self.state.current_task = None
            if self.state.phase in STAGE_PHASES:
                self.state.advance(Phase.POLLING)

    # interruption ----------------------------------------------------------

    def handle_interruption(self, notice_deadline_seconds: float = INTERRUPTION_NOTICE_SECONDS) -> None:
        """React to a spot interruption notice.

        From the worker's own thread, or when idle, the drain happens
        immediately.  Otherwise the running stage is signalled and the worker
        thread drains; if it does not within the deadline, drain from here.
        """
        with self._lock:
            if self._stop.is_set():
                return
            self._stop.set()
            busy = self.state.current_task is not None
        if threading.current_thread() is self._run_thread and busy:
            return
        if not busy:
            self._drain(0.0)
            return
        if not self._drained.wait(notice_deadline_seconds):
            log.warning("%s: worker did not drain within %.0fs", self.worker_id, notice_deadline_seconds)
            self._drain(0.0)

    def _drain(self, wasted_seconds: float) -> None:
        with self._lock:
            if self._drained.is_set():
                return
            self._stop.set()
            if self.state.phase is not Phase.TERMINATED:
                self.state.advance(Phase.DRAINING)
            task = self.state.current_task
            self._settle("nack")
            if task is not None:
                shutil.rmtree(self.workdir_root / task.sra_id, ignore_errors=True)
            self.state.current_task = None
            self.report.wasted_seconds += wasted_seconds
            self.report.interrupted = True
            if self.state.phase is not Phase.TERMINATED:
                self.state.advance(Phase.TERMINATED)
            self._drained.set()


class _Heartbeat:
    """Extends the held lease every half visibility period (wall clock)."""

    def __init__(self, worker: Worker, visibility: float) -> None:
        self._worker = worker
        self._visibility = visibility
        self._done = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True, name=f"hb-{worker.worker_id}")
        self._thread.start()

    def _run(self) -> None:
        while not self._done.wait(self._visibility / 2):
            self._worker._extend(self._visibility)

    def stop(self) -> None:
        self._done.set()
        self._thread.join()


def run_worker(
    queues: Mapping[str, WorkQueue],
    ledger: Ledger,
    executor: Executor,
    policy: EarlyStopPolicy = EarlyStopPolicy(),
    envelope: ResourceEnvelope = ResourceEnvelope(),
    clock: Callable[[], float] = time.time,
    worker_id: str = "worker-0",
    drain: Optional[threading.Event] = None,
    **kwargs,
) -> WorkerReport:
    worker = Worker(worker_id, queues, ledger, executor, policy, envelope, clock, **kwargs)
    return worker.run(drain)


def merge_reports(reports: Sequence[WorkerReport]) -> dict:
    counters = ("tasks_completed", "tasks_failed", "tasks_terminated_early", "tasks_skipped",
                "tasks_retried", "disk_rejections", "duplicate_completions")
    out: dict = {key: sum(getattr(r, key) for r in reports) for key in counters}
    out["index_load_seconds"] = sum(r.index_load_seconds for r in reports)
    out["wasted_seconds"] = sum(r.wasted_seconds for r in reports)
    stages = defaultdict(float, {s: 0.0 for s in STAGES})
    for r in reports:
        for s, v in r.stage_seconds.items():
            stages[s] += v
    out["stage_seconds"] = dict(stages)
    out["workers"] = len(reports)
    return out
