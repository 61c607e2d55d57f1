"""Task manifest, visibility-timeout work queue and the completion ledger."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import threading
import time
import uuid
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

log = logging.getLogger(__name__)

GIB = 1024**3
MIN_TASK_BYTES = 200_000_000
MAX_TASK_BYTES = 30_000_000_000

QUEUE_MAIN = "main"
QUEUE_SMALL = "small"
QUEUE_LARGE = "large"

MANIFEST_FIELDS = ("sra_id", "size_bytes", "expected_reads", "tissue")
# Optional per-task overrides accepted after the required columns.
MANIFEST_OPTIONAL = ("final_mapping_rate", "fastq_expansion", "sort_memory_gib")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    sra_id: str
    compressed_size_bytes: int
    expected_total_reads: Optional[int] = None
    tissue: str = ""
    fastq_expansion_factor: Optional[float] = None
    sort_memory_gib: Optional[float] = None
    final_mapping_rate: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.sra_id:
            raise ValueError("sra_id must be non-empty")
        if self.compressed_size_bytes < 0:
            raise ValueError("compressed_size_bytes must be >= 0")
        if self.fastq_expansion_factor is not None and self.fastq_expansion_factor <= 0:
            raise ValueError("fastq_expansion_factor must be positive")
        if self.sort_memory_gib is not None and self.sort_memory_gib < 0:
            raise ValueError("sort_memory_gib must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(**data)


def _optional(value: Optional[str], cast):
    if value is None or value.strip() == "":
        return None
    return cast(value)


def read_manifest(
    path: Union[str, Path],
    min_bytes: int = MIN_TASK_BYTES,
    max_bytes: int = MAX_TASK_BYTES,
) -> list[TaskSpec]:
    """Load a manifest CSV, enforcing unique ids and the admission size range."""
    tasks: list[TaskSpec] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in MANIFEST_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                task = TaskSpec(
                    sra_id=row["sra_id"].strip(),
                    compressed_size_bytes=int(row["size_bytes"]),
                    expected_total_reads=_optional(row["expected_reads"], int),
                    tissue=(row["tissue"] or "").strip(),
                    final_mapping_rate=_optional(row.get("final_mapping_rate"), float),
                    fastq_expansion_factor=_optional(row.get("fastq_expansion"), float),
                    sort_memory_gib=_optional(row.get("sort_memory_gib"), float),
                )
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if task.sra_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate sra_id {task.sra_id}")
            if not min_bytes <= task.compressed_size_bytes <= max_bytes:
                raise ManifestError(
                    f"{path}:{lineno}: {task.sra_id} size {task.compressed_size_bytes} "
                    f"outside admission range [{min_bytes}, {max_bytes}]"
                )
            seen.add(task.sra_id)
            tasks.append(task)
    return tasks


def write_manifest(path: Union[str, Path], tasks: Iterable[TaskSpec]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS + MANIFEST_OPTIONAL)
        for t in tasks:
            writer.writerow([
                t.sra_id,
                t.compressed_size_bytes,
                "" if t.expected_total_reads is None else t.expected_total_reads,
                t.tissue,
                "" if t.final_mapping_rate is None else repr(t.final_mapping_rate),
                "" if t.fastq_expansion_factor is None else repr(t.fastq_expansion_factor),
                "" if t.sort_memory_gib is None else repr(t.sort_memory_gib),
            ])


def route(task: TaskSpec, size_threshold_bytes: int) -> str:
    """Small queue iff the compressed size is strictly below the threshold."""
    if size_threshold_bytes <= 0:
        raise ValueError("size_threshold_bytes must be positive")
    return QUEUE_SMALL if task.compressed_size_bytes < size_threshold_bytes else QUEUE_LARGE


def assign_queue(task: TaskSpec, size_threshold_bytes: Optional[int]) -> str:
    if size_threshold_bytes is None:
        return QUEUE_MAIN
    return route(task, size_threshold_bytes)


def _open_append(path: Path):
    """Open a JSONL file for appending, terminating a torn last line first."""
    with open(path, "rb+") as raw:
        raw.seek(0, 2)
        if raw.tell() > 0:
            raw.seek(-1, 2)
            if raw.read(1) != b"\n":
                raw.write(b"\n")
    return open(path, "a", encoding="utf-8")


# --------------------------------------------------------------------------
# Queue


class QueueError(Exception):
    pass


class UnknownReceipt(QueueError):
    pass


class ExpiredReceipt(QueueError):
    pass


@dataclass(frozen=True)
class QueueMessage:
    message_id: str
    task: TaskSpec
    attempt: int
    visible_after: float
    receipt: Optional[str] = None


@dataclass
class _Entry:
    task: TaskSpec
    seq: int
    deliveries: int = 0
    visible_after: float = 0.0
    receipt: Optional[str] = None


class WorkQueue:
    """At-least-once queue with visibility timeouts.

    Leased messages stay hidden until ``visible_after``; an unacked lease
    reappears afterwards with its attempt count incremented.  With a
    *journal_path* every mutation is appended as one JSON line and replayed on
    open.
    """

    def __init__(
        self,
        name: str = QUEUE_MAIN,
        journal_path: Union[str, Path, None] = None,
        clock: Callable[[], float] = time.time,
    ) -> None:
        self.name = name
        self.clock = clock
        self._lock = threading.RLock()
        self._entries: dict[str, _Entry] = {}
        self._receipts: dict[str, str] = {}
        self._seq = itertools.count()
        self._ids = itertools.count(1)
        self._journal = None
        if journal_path is not None:
            path = Path(journal_path)
            if path.exists():
                self._replay(path)
            else:
                path.touch()
            self._journal = _open_append(path)

    # journal -------------------------------------------------------------

    def _write(self, op: str, message_id: str, now: float, payload=None) -> None:
        if self._journal is None:
            return
        record = {"op": op, "message_id": message_id, "timestamp": now}
        if payload is not None:
            record["payload"] = payload
        self._journal.write(json.dumps(record, sort_keys=True) + "\n")
        self._journal.flush()

    def _replay(self, path: Path) -> None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    # A write torn by a crash; later appends start on a fresh line.
                    log.warning("%s:%d: skipping unreadable journal line", path, lineno)
                    continue
                self._apply(rec)

    def _apply(self, rec: dict) -> None:
        op, mid = rec["op"], rec["message_id"]
        payload = rec.get("payload") or {}
        if op == "enqueue":
            self._entries[mid] = _Entry(TaskSpec.from_dict(payload["task"]), next(self._seq))
            num = mid.rsplit("-", 1)[-1]
            if num.isdigit():
                self._ids = itertools.count(max(int(num) + 1, next(self._ids)))
            return
        entry = self._entries.get(mid)
        if entry is None:
            return
        if op == "lease":
            if entry.receipt is not None:
                self._receipts.pop(entry.receipt, None)
            entry.deliveries += 1
            entry.receipt = payload["receipt"]
            entry.visible_after = payload["visible_after"]
            self._receipts[entry.receipt] = mid
        elif op == "extend":
            entry.visible_after = payload["visible_after"]
        elif op == "nack":
            self._drop_receipt(entry)
            entry.visible_after = rec["timestamp"]
        elif op == "ack":
            self._drop_receipt(entry)
            del self._entries[mid]

    def _drop_receipt(self, entry: _Entry) -> None:
        if entry.receipt is not None:
            self._receipts.pop(entry.receipt, None)
            entry.receipt = None

    def close(self) -> None:
        if self._journal is not None:
            self._journal.close()
            self._journal = None

    # operations ----------------------------------------------------------

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def pending_ids(self) -> set[str]:
        with self._lock:
            return {e.task.sra_id for e in self._entries.values()}

    def enqueue(self, task: TaskSpec, now: Optional[float] = None) -> str:
        with self._lock:
            now = self.clock() if now is None else now
            mid = f"{self.name}-{next(self._ids)}"
            self._entries[mid] = _Entry(task, next(self._seq), visible_after=now)
            self._write("enqueue", mid, now, {"task": task.to_dict()})
            return mid

    def lease(self, visibility_seconds: float, now: Optional[float] = None) -> Optional[QueueMessage]:
        if visibility_seconds <= 0:
            raise ValueError("visibility_seconds must be positive")
        with self._lock:
            now = self.clock() if now is None else now
            visible = [
                (e.visible_after, e.seq, mid)
                for mid, e in self._entries.items()
                if e.receipt is None or e.visible_after <= now
            ]
            if not visible:
                return None
            _, _, mid = min(visible)
            entry = self._entries[mid]
            self._drop_receipt(entry)
            entry.deliveries += 1
            entry.receipt = uuid.uuid4().hex
            entry.visible_after = now + visibility_seconds
            self._receipts[entry.receipt] = mid
            self._write("lease", mid, now,
                        {"receipt": entry.receipt, "visible_after": entry.visible_after})
            return QueueMessage(mid, entry.task, entry.deliveries, entry.visible_after, entry.receipt)

    def _live_entry(self, receipt: str, now: float) -> tuple[str, _Entry]:
        mid = self._receipts.get(receipt)
        if mid is None:
            raise UnknownReceipt(receipt)
        entry = self._entries[mid]
        if entry.visible_after <= now:
            raise ExpiredReceipt(f"lease on {mid} expired at {entry.visible_after}")
        return mid, entry

    def ack(self, receipt: str, now: Optional[float] = None) -> None:
        """Remove the message for good.  An expired lease raises
        :class:`ExpiredReceipt` and leaves the message queued."""
        with self._lock:
            now = self.clock() if now is None else now
            mid, entry = self._live_entry(receipt, now)
            self._drop_receipt(entry)
            del self._entries[mid]
            self._write("ack", mid, now)

    def nack(self, receipt: str, now: Optional[float] = None) -> None:
        with self._lock:
            now = self.clock() if now is None else now
            mid, entry = self._live_entry(receipt, now)
            self._drop_receipt(entry)
            entry.visible_after = now
            self._write("nack", mid, now)

    def recover_leases(self, now: Optional[float] = None) -> int:
        """Make every leased message visible again.

        Used on startup by the only process that owns the journal: leases
        replayed from a previous run belong to workers that no longer exist.
        """
        with self._lock:
            now = self.clock() if now is None else now
            held = [(mid, e) for mid, e in self._entries.items() if e.receipt is not None]
            for mid, entry in held:
                self._drop_receipt(entry)
                entry.visible_after = now
                self._write("nack", mid, now)
            return len(held)

    def extend(self, receipt: str, seconds: float, now: Optional[float] = None) -> None:
        with self._lock:
            now = self.clock() if now is None else now
            mid, entry = self._live_entry(receipt, now)
            entry.visible_after = now + seconds
            self._write("extend", mid, now, {"visible_after": entry.visible_after})


# --------------------------------------------------------------------------
# Ledger


class Status(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"
    IN_PROGRESS = "in_progress"


class ConflictingCompletion(Exception):
    """A second ``completed`` record for an id that is already complete."""


@dataclass
class LedgerRecord:
    sra_id: str
    status: Status
    worker_id: str = ""
    stage_timings: dict[str, float] = field(default_factory=dict)
    final_mapping_rate: Optional[float] = None
    attempt: int = 1
    terminated_early: bool = False

    def to_json(self) -> str:
        data = asdict(self)
        data["status"] = self.status.value
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "LedgerRecord":
        data = dict(data)
        data["status"] = Status(data["status"])
        return cls(**data)


class Ledger:
    """Append-only record of task outcomes.

    Readback is latest-status-wins, except that ``completed`` is sticky: once
    an id is complete it stays complete.
    """

    def __init__(self, path: Union[str, Path, None] = None) -> None:
        self._lock = threading.Lock()
        self._records: list[LedgerRecord] = []
        self._latest: dict[str, LedgerRecord] = {}
        self._completed: set[str] = set()
        self.duplicate_completions = 0
        self._fh = None
        if path is not None:
            path = Path(path)
            if path.exists():
                for rec in read_ledger(path):
                    self._index(rec)
            else:
                path.touch()
            self._fh = _open_append(path)

    def _index(self, rec: LedgerRecord) -> None:
        self._records.append(rec)
        if rec.sra_id in self._completed:
            return
        self._latest[rec.sra_id] = rec
        if rec.status is Status.COMPLETED:
            self._completed.add(rec.sra_id)

    def already_processed(self, sra_id: str) -> bool:
        with self._lock:
            return sra_id in self._completed

    def status(self, sra_id: str) -> Optional[Status]:
        with self._lock:
            rec = self._latest.get(sra_id)
            return rec.status if rec else None

    def latest(self, sra_id: str) -> Optional[LedgerRecord]:
        with self._lock:
            return self._latest.get(sra_id)

    def records(self) -> list[LedgerRecord]:
        with self._lock:
            return list(self._records)

    def latest_records(self) -> dict[str, LedgerRecord]:
        with self._lock:
            return dict(self._latest)

    def record(self, rec: LedgerRecord) -> None:
        with self._lock:
            if rec.status is Status.COMPLETED and rec.sra_id in self._completed:
                self.duplicate_completions += 1
                log.warning("duplicate completion for %s ignored", rec.sra_id)
                raise ConflictingCompletion(rec.sra_id)
            self._index(rec)
            if self._fh is not None:
                self._fh.write(rec.to_json() + "\n")
                self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_ledger(path: Union[str, Path]) -> list[LedgerRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(LedgerRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                log.warning("%s:%d: skipping unreadable ledger line", path, lineno)
                continue
    return out
