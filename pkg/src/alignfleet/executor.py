"""Stage execution: synthetic progress trajectories and a subprocess adapter."""

from __future__ import annotations

import logging
import math
import os
import random
import shlex
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Callable, Iterable, Optional, TextIO

from .perf import ScalingModel, align_duration
from .progress import (
    TIMESTAMP_FORMAT,
    EarlyStopPolicy,
    ProgressSample,
    StopDecision,
    evaluate,
    iter_progress_samples,
    mapping_rate,
    supervise,
)
from .queue import TaskSpec

log = logging.getLogger(__name__)

STAGES = ("Prefetch", "Convert", "Align", "SortNormalize", "Upload")
KILL_GRACE_SECONDS = 10.0
PROGRESS_EPOCH = datetime(2000, 1, 1)

PROGRESS_HEADER = (
    "           Time    Speed        Read     Read   Mapped   Mapped   Mapped   Mapped"
    " Unmapped Unmapped Unmapped Unmapped\n"
    "                    M/hr      number   length   unique   length   MMrate    multi"
    "   multi+       MM    short    other\n"
)


# --------------------------------------------------------------------------
# Synthetic trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    final_mapping_rate: float
    read_speed_reads_per_second: float
    total_reads: int
    noise_std: float = 0.02
    seed: int = 0
    shape: str = "constant"
    ramp_start_rate: float = 0.0
    unique_share: float = 0.86

    def __post_init__(self) -> None:
        if not 0.0 <= self.final_mapping_rate <= 1.0:
            raise ValueError("final_mapping_rate must be in [0, 1]")
        if self.read_speed_reads_per_second <= 0:
            raise ValueError("read_speed_reads_per_second must be positive")
        if self.total_reads < 1:
            raise ValueError("total_reads must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.shape not in ("constant", "ramp"):
            raise ValueError(f"unknown trajectory shape {self.shape!r}")
        if not 0.0 <= self.unique_share <= 1.0:
            raise ValueError("unique_share must be in [0, 1]")


def synth_progress(spec: TrajectorySpec, poll_interval: float) -> list[ProgressSample]:
    """Samples every *poll_interval* seconds until all reads are processed.

    The mapping rate is the spec's mean (or a linear ramp towards it) plus
    seeded Gaussian noise, clamped to [0, 1].
    """
    if poll_interval <= 0:
        raise ValueError("poll_interval must be positive")
    rng = random.Random(spec.seed)
    duration = spec.total_reads / spec.read_speed_reads_per_second
    n = max(1, math.ceil(duration / poll_interval - 1e-9))
    samples = []
    for k in range(1, n + 1):
        t = k * poll_interval
        reads = spec.total_reads if k == n else min(spec.total_reads, round(spec.read_speed_reads_per_second * t))
        mean = spec.final_mapping_rate
        if spec.shape == "ramp":
            mean = spec.ramp_start_rate + (spec.final_mapping_rate - spec.ramp_start_rate) * k / n
        noise = rng.gauss(0.0, spec.noise_std) if spec.noise_std > 0 else 0.0
        rate = min(1.0, max(0.0, mean + noise))
        unique = rate * spec.unique_share
        multi = min(rate - unique, 1.0 - unique)
        samples.append(ProgressSample(float(t), int(reads), unique, max(0.0, multi)))
    return samples


def format_progress_line(sample: ProgressSample, started_at: datetime = PROGRESS_EPOCH,
                         read_length: float = 100.0) -> str:
    """Render a sample in the STAR 2.7 ``Log.progress.out`` column layout."""
    stamp = (started_at + timedelta(seconds=sample.elapsed_seconds)).strftime(TIMESTAMP_FORMAT)
    hours = sample.elapsed_seconds / 3600.0
    speed = sample.reads_processed / 1e6 / hours if hours > 0 else 0.0
    unmapped = max(0.0, 1.0 - mapping_rate(sample))
    return (
        f"{stamp} {speed:8.1f} {sample.reads_processed:11d} {read_length:8.1f}"
        f" {sample.pct_unique_mapped * 100:7.3f}% {read_length:8.1f} {0.0:7.1f}%"
        f" {sample.pct_multi_mapped * 100:7.3f}% {0.0:7.1f}% {0.0:7.1f}%"
        f" {unmapped * 100:7.1f}% {0.0:7.1f}%"
    )


def write_progress_log(samples: Iterable[ProgressSample], fh: TextIO,
                       started_at: datetime = PROGRESS_EPOCH) -> None:
    fh.write(PROGRESS_HEADER)
    for s in samples:
        fh.write(format_progress_line(s, started_at) + "\n")


# --------------------------------------------------------------------------
# Stage outcomes shared by both executors


class StageError(Exception):
    """Base for stage failures; ``retryable`` tells the worker whether to requeue."""

    retryable = True


class SpawnFailure(StageError):
    pass


class StageTimeout(StageError):
    pass


class KilledByPolicy(StageError):
    """The child was stopped on purpose (early stop or interruption)."""

    def __init__(self, message: str, wall_seconds: float) -> None:
        super().__init__(message)
        self.wall_seconds = wall_seconds


class ExecutorFailure(StageError):
    pass


class OutOfMemorySort(StageError):
    pass


class StageInterrupted(Exception):
    """Raised when the worker's stop signal fires mid-stage."""

    def __init__(self, partial_seconds: float) -> None:
        super().__init__(f"interrupted after {partial_seconds:.1f}s")
        self.partial_seconds = partial_seconds


@dataclass
class StageResult:
    exit_status: int
    wall_seconds: float


@dataclass
class StageOutcome:
    seconds: float
    terminated_early: bool = False
    final_mapping_rate: Optional[float] = None
    consumed_fraction: float = 1.0
    decision: Optional[StopDecision] = None


@dataclass
class StageContext:
    """Per-task execution context handed to an executor."""

    workdir: Path
    threads: int
    index_dir: str
    policy: EarlyStopPolicy
    stop: threading.Event = field(default_factory=threading.Event)


# --------------------------------------------------------------------------
# Subprocess adapter


def render_command(template: str, task: TaskSpec, workdir: Path, threads: int, index_dir: str) -> list[str]:
    text = template.format(sra_id=task.sra_id, workdir=str(workdir), threads=threads, index_dir=index_dir)
    return shlex.split(text)


def _signal_group(proc: subprocess.Popen, sig: int) -> None:
    try:
        os.killpg(proc.pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def exec_stage(
    command_template: str,
    task: TaskSpec,
    timeout: Optional[float],
    kill_signal: Optional[threading.Event] = None,
    *,
    workdir: Path = Path("."),
    threads: int = 1,
    index_dir: str = "",
    grace_seconds: float = KILL_GRACE_SECONDS,
    poll_seconds: float = 0.05,
    env: Optional[dict] = None,
    log_path: Optional[Path] = None,
) -> StageResult:
    """Run one stage command and wait for it.

    Setting *kill_signal* (from any thread) stops the child: SIGTERM to its
    process group, then SIGKILL after *grace_seconds*.  Child output goes to
    *log_path* when given, else it is discarded.
    """
    try:
        argv = render_command(command_template, task, workdir, threads, index_dir)
    except (KeyError, IndexError, ValueError) as exc:
        raise SpawnFailure(f"bad command template {command_template!r}: {exc}") from None
    if not argv:
        raise SpawnFailure("empty command")
    log_fh = open(log_path, "ab") if log_path is not None else subprocess.DEVNULL
    start = time.monotonic()
    try:
        proc = subprocess.Popen(argv, cwd=workdir, env=env, start_new_session=True,
                                stdout=log_fh, stderr=log_fh)
    except OSError as exc:
        raise SpawnFailure(f"{argv[0]}: {exc}") from None
    finally:
        if log_path is not None:
            log_fh.close()

    reason = None
    while True:
        try:
            proc.wait(timeout=poll_seconds)
            break
        except subprocess.TimeoutExpired:
            pass
        if kill_signal is not None and kill_signal.is_set():
            reason = "policy"
        elif timeout is not None and time.monotonic() - start > timeout:
            reason = "timeout"
        if reason:
            _terminate(proc, grace_seconds)
            break
    wall = time.monotonic() - start
    if reason == "policy":
        raise KilledByPolicy(f"{argv[0]} stopped after {wall:.1f}s", wall)
    if reason == "timeout":
        raise StageTimeout(f"{argv[0]} exceeded {timeout}s")
    return StageResult(proc.returncode, wall)


def _terminate(proc: subprocess.Popen, grace_seconds: float) -> None:
    _signal_group(proc, signal.SIGTERM)
    try:
        proc.wait(timeout=grace_seconds)
    except subprocess.TimeoutExpired:
        _signal_group(proc, signal.SIGKILL)
        proc.wait()


class ProgressWatcher:
    """Tails a progress file and fires *on_terminate* when the policy says stop."""

    def __init__(
        self,
        path: Path,
        policy: EarlyStopPolicy,
        expected_total_reads: Optional[int],
        on_terminate: Callable[[StopDecision], None],
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.path = Path(path)
        self.policy = policy
        self.expected_total_reads = expected_total_reads
        self.on_terminate = on_terminate
        self.clock = clock
        self.decision: Optional[StopDecision] = None
        self.last_sample: Optional[ProgressSample] = None
        self.fired_at: Optional[float] = None
        self._offset = 0
        self._partial = ""
        self._done = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def poll_once(self) -> Optional[StopDecision]:
        """Read newly written complete lines and evaluate them."""
        if self.decision is not None and self.decision.terminate:
            return self.decision
        try:
            with open(self.path, encoding="utf-8", errors="replace") as fh:
                fh.seek(self._offset)
                chunk = fh.read()
                self._offset = fh.tell()
        except FileNotFoundError:
            return None
        text = self._partial + chunk
        lines = text.split("\n")
        self._partial = lines.pop()
        for sample in iter_progress_samples(lines, started_at=None):
            self.last_sample = sample
            self.decision = evaluate(self.policy, sample, self.expected_total_reads)
            if self.decision.terminate:
                self.fired_at = self.clock()
                self.on_terminate(self.decision)
                return self.decision
        return None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name=f"watch-{self.path.name}", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._done.is_set():
            if self.poll_once() is not None:
                return
            self._done.wait(self.policy.poll_interval_seconds)

    def stop(self) -> None:
        self._done.set()
        if self._thread is not None:
            self._thread.join()


class SubprocessExecutor:
    """Runs each stage as an external command from a template table.

    The Align stage is watched through its progress file; a Terminate
    verdict stops the aligner and the stage counts as an early stop.
    """

    def __init__(
        self,
        commands: dict[str, str],
        progress_file: str = "{workdir}/Log.progress.out",
        timeouts: Optional[dict[str, float]] = None,
        grace_seconds: float = KILL_GRACE_SECONDS,
    ) -> None:
        self.commands = commands
        self.progress_file = progress_file
        self.timeouts = timeouts or {}
        self.grace_seconds = grace_seconds

    def run_stage(self, stage: str, task: TaskSpec, ctx: StageContext) -> StageOutcome:
        template = self.commands.get(stage)
        if not template:
            return StageOutcome(0.0)
        if stage != "Align":
            return self._run(stage, template, task, ctx, ctx.stop)

        align_stop = threading.Event()
        relay = threading.Thread(target=self._relay, args=(ctx.stop, align_stop), daemon=True)
        relay.start()
        progress = Path(self.progress_file.format(workdir=ctx.workdir, sra_id=task.sra_id))
        watcher = ProgressWatcher(progress, ctx.policy, task.expected_total_reads,
                                  on_terminate=lambda _d: align_stop.set())
        watcher.start()
        try:
            return self._run(stage, template, task, ctx, align_stop)
        except KilledByPolicy as exc:
            if ctx.stop.is_set():
                raise StageInterrupted(exc.wall_seconds) from None
            decision = watcher.decision
            return StageOutcome(exc.wall_seconds, terminated_early=True,
                                final_mapping_rate=decision.observed_rate if decision else None,
                                consumed_fraction=(decision.processed_fraction or 0.0) if decision else 0.0,
                                decision=decision)
        finally:
            watcher.stop()
            align_stop.set()

    @staticmethod
    def _relay(source: threading.Event, target: threading.Event) -> None:
        while not target.is_set():
            if source.wait(0.05):
                target.set()
                return

    def _run(self, stage, template, task, ctx, kill) -> StageOutcome:
        try:
            res = exec_stage(template, task, self.timeouts.get(stage), kill,
                             workdir=ctx.workdir, threads=ctx.threads, index_dir=ctx.index_dir,
                             grace_seconds=self.grace_seconds,
                             log_path=ctx.workdir / f"{stage}.log")
        except KilledByPolicy as exc:
            if stage != "Align" or ctx.stop.is_set():
                raise StageInterrupted(exc.wall_seconds) from None
            raise
        if res.exit_status != 0:
            raise ExecutorFailure(f"{stage} exited with status {res.exit_status}")
        outcome = StageOutcome(res.wall_seconds)
        if stage == "Align":
            progress = Path(self.progress_file.format(workdir=ctx.workdir, sra_id=task.sra_id))
            if progress.exists():
                with open(progress, encoding="utf-8", errors="replace") as fh:
                    samples = list(iter_progress_samples(fh))
                if samples:
                    outcome.final_mapping_rate = mapping_rate(samples[-1])
        return outcome


# --------------------------------------------------------------------------
# Synthetic executor


@dataclass
class StageTimeModel:
    """Durations of the non-alignment stages in synthetic mode."""

    prefetch_bytes_per_second: float = 50e6
    convert_bytes_per_second: float = 40e6
    normalize_fraction_of_align: float = 0.05
    upload_seconds: float = 10.0

    def seconds(self, stage: str, size_bytes: float, full_align_seconds: float) -> float:
        if stage == "Prefetch":
            return size_bytes / self.prefetch_bytes_per_second
        if stage == "Convert":
            return size_bytes / self.convert_bytes_per_second
        if stage == "SortNormalize":
            return self.normalize_fraction_of_align * full_align_seconds
        if stage == "Upload":
            return self.upload_seconds
        raise ValueError(f"no time model for stage {stage!r}")


DEFAULT_BASE_THROUGHPUT = 1.0e6
DEFAULT_MAPPING_RATE = 0.9
# Compressed bytes per read, used when a task has no read count.
BYTES_PER_READ = 80.0


def trajectory_for(task: TaskSpec, full_align_seconds: float, seed: int, noise_std: float = 0.02,
                   default_rate: float = DEFAULT_MAPPING_RATE) -> TrajectorySpec:
    total = task.expected_total_reads or max(1, round(task.compressed_size_bytes / BYTES_PER_READ))
    rate = task.final_mapping_rate if task.final_mapping_rate is not None else default_rate
    return TrajectorySpec(
        final_mapping_rate=rate,
        read_speed_reads_per_second=total / max(full_align_seconds, 1e-9),
        total_reads=total,
        noise_std=noise_std,
        seed=seed,
    )


def task_seed(seed: int, sra_id: str) -> int:
    # str hashing is salted per process; derive a stable integer instead.
    return random.Random(f"{seed}:{sra_id}").getrandbits(32)


def early_stop_fraction(task: TaskSpec, full_align_seconds: float, policy: EarlyStopPolicy,
                        seed: int, noise_std: float = 0.02) -> tuple[StopDecision, float, float]:
    """Run the supervisor over a task's synthetic trajectory.

    Returns ``(decision, consumed_fraction, last_observed_rate)``.
    """
    spec = trajectory_for(task, full_align_seconds, task_seed(seed, task.sra_id), noise_std)
    samples = synth_progress(spec, policy.poll_interval_seconds)
    decision, consumed = supervise(samples, policy, task.expected_total_reads)
    rate = decision.observed_rate if decision.observed_rate is not None else mapping_rate(samples[-1])
    return decision, consumed, rate


class SyntheticExecutor:
    """Deterministic stand-in for the real tools.

    Durations come from the scaling model and :class:`StageTimeModel`;
    Align runs the early-stop supervisor over a synthetic trajectory.  With
    ``time_scale > 0`` each stage also sleeps ``seconds * time_scale`` and
    honours the stop event.
    """

    def __init__(
        self,
        scaling: Optional[ScalingModel] = None,
        stage_times: Optional[StageTimeModel] = None,
        base_throughput: float = DEFAULT_BASE_THROUGHPUT,
        seed: int = 0,
        noise_std: float = 0.02,
        time_scale: float = 0.0,
        write_progress: bool = False,
        failures: Optional[dict[tuple[str, str], StageError]] = None,
    ) -> None:
        self.scaling = scaling or ScalingModel()
        self.stage_times = stage_times or StageTimeModel()
        self.base_throughput = base_throughput
        self.seed = seed
        self.noise_std = noise_std
        self.time_scale = time_scale
        self.write_progress = write_progress
        # (sra_id, stage) -> error raised when that stage runs
        self.failures = failures or {}

    def full_align_seconds(self, task: TaskSpec, threads: int) -> float:
        return align_duration(self.scaling, max(task.compressed_size_bytes, 1), threads, self.base_throughput)

    def estimate_task_seconds(self, task: TaskSpec, threads: int) -> float:
        full = self.full_align_seconds(task, threads)
        return full + sum(self.stage_times.seconds(s, task.compressed_size_bytes, full)
                          for s in STAGES if s != "Align")

    def run_stage(self, stage: str, task: TaskSpec, ctx: StageContext) -> StageOutcome:
        err = self.failures.get((task.sra_id, stage))
        if err is not None:
            raise err
        full = self.full_align_seconds(task, ctx.threads)
        if stage != "Align":
            outcome = StageOutcome(self.stage_times.seconds(stage, task.compressed_size_bytes, full))
        else:
            decision, consumed, rate = early_stop_fraction(task, full, ctx.policy, self.seed, self.noise_std)
            outcome = StageOutcome(full * consumed, terminated_early=decision.terminate,
                                   final_mapping_rate=rate, consumed_fraction=consumed, decision=decision)
            if self.write_progress:
                spec = trajectory_for(task, full, task_seed(self.seed, task.sra_id), self.noise_std)
                samples = synth_progress(spec, ctx.policy.poll_interval_seconds)
                if decision.terminate:
                    # Keep everything up to and including the deciding sample.
                    cut = decision.processed_fraction * spec.total_reads
                    samples = [s for s in samples if s.reads_processed <= cut]
                ctx.workdir.mkdir(parents=True, exist_ok=True)
                with open(ctx.workdir / "Log.progress.out", "w", encoding="utf-8") as fh:
                    write_progress_log(samples, fh)
        self._sleep(outcome.seconds, ctx)
        return outcome

    def _sleep(self, seconds: float, ctx: StageContext) -> None:
        if self.time_scale <= 0:
            if ctx.stop.is_set():
                raise StageInterrupted(0.0)
            return
        start = time.monotonic()
        if ctx.stop.wait(seconds * self.time_scale):
            raise StageInterrupted((time.monotonic() - start) / self.time_scale)
