"""Progress-log parsing and the early-stop rule for running alignments.

STAR writes one line to ``Log.progress.out`` per reporting interval.  The
monitor parses those lines into :class:`ProgressSample` objects and decides,
per sample, whether the alignment is worth finishing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Iterable, Iterator, Mapping, Optional, Sequence

# 0-based token indices after whitespace splitting (STAR 2.7 layout).
DEFAULT_COLUMNS: dict[str, int] = {
    "reads_processed": 4,
    "pct_unique": 6,
    "pct_multi": 9,
}
TIMESTAMP_TOKENS = 3
TIMESTAMP_FORMAT = "%b %d %H:%M:%S"
# Leap year so that "Feb 29" parses.
_TIMESTAMP_YEAR = 2000

_SUM_SLACK = 1e-9


class MalformedLine(ValueError):
    """A progress-log line that does not carry a usable sample."""


class Verdict(str, Enum):
    CONTINUE = "Continue"
    TERMINATE = "Terminate"
    INDETERMINATE = "Indeterminate"


@dataclass(frozen=True)
class ProgressSample:
    elapsed_seconds: float
    reads_processed: int
    pct_unique_mapped: float
    pct_multi_mapped: float

    def __post_init__(self) -> None:
        if not self.elapsed_seconds >= 0:
            raise ValueError(f"elapsed_seconds must be >= 0, got {self.elapsed_seconds}")
        if self.reads_processed < 0:
            raise ValueError(f"reads_processed must be >= 0, got {self.reads_processed}")
        for name in ("pct_unique_mapped", "pct_multi_mapped"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.pct_unique_mapped + self.pct_multi_mapped > 1.0 + _SUM_SLACK:
            raise ValueError("unique + multi mapped fractions exceed 1")


@dataclass(frozen=True)
class EarlyStopPolicy:
    threshold: float = 0.30
    min_processed_fraction: float = 0.10
    poll_interval_seconds: float = 30.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if not 0.0 < self.min_processed_fraction <= 1.0:
            raise ValueError(
                f"min_processed_fraction must be in (0, 1], got {self.min_processed_fraction}"
            )
        if not self.poll_interval_seconds > 0:
            raise ValueError("poll_interval_seconds must be positive")


@dataclass(frozen=True)
class StopDecision:
    verdict: Verdict
    observed_rate: Optional[float]
    processed_fraction: Optional[float]
    reason: str

    @property
    def terminate(self) -> bool:
        return self.verdict is Verdict.TERMINATE


def parse_fraction(token: str) -> float:
    """Parse ``"80.3%"``, ``"80.3"`` or ``"0.803"`` into 0.803.

    Without a percent sign, values above 1 are read as percentages.
    """
    text = token.strip()
    is_percent = text.endswith("%")
    if is_percent:
        text = text[:-1]
    try:
        value = float(text)
    except ValueError:
        raise MalformedLine(f"not a number: {token!r}") from None
    if not math.isfinite(value) or value < 0:
        raise MalformedLine(f"bad fraction: {token!r}")
    if is_percent or value > 1.0:
        value /= 100.0
    if value > 1.0:
        raise MalformedLine(f"fraction above 100%: {token!r}")
    return value


def parse_timestamp(tokens: Sequence[str]) -> datetime:
    text = " ".join(tokens[:TIMESTAMP_TOKENS])
    try:
        return datetime.strptime(f"{_TIMESTAMP_YEAR} {text}", f"%Y {TIMESTAMP_FORMAT}")
    except ValueError:
        raise MalformedLine(f"bad timestamp: {text!r}") from None


def parse_progress_line(
    line: str,
    column_map: Optional[Mapping[str, int]] = None,
    started_at: Optional[datetime] = None,
) -> ProgressSample:
    """Parse one ``Log.progress.out`` line.

    Raises :class:`MalformedLine` for headers, blank or truncated lines and
    non-numeric tokens at mapped positions; callers skip those lines.  When
    *started_at* is given, ``elapsed_seconds`` is measured from it using the
    line's timestamp, otherwise it is 0.
    """
    columns = dict(DEFAULT_COLUMNS)
    if column_map:
        columns.update(column_map)
    if not isinstance(line, str):
        raise MalformedLine("line is not text")
    tokens = line.split()
    if not tokens:
        raise MalformedLine("blank line")
    needed = max(columns.values()) + 1
    if len(tokens) < needed:
        raise MalformedLine(f"expected at least {needed} tokens, got {len(tokens)}")

    reads_token = tokens[columns["reads_processed"]]
    if not reads_token.isascii() or not reads_token.isdigit():
        raise MalformedLine(f"reads_processed not an integer: {reads_token!r}")
    reads = int(reads_token)
    unique = parse_fraction(tokens[columns["pct_unique"]])
    multi = parse_fraction(tokens[columns["pct_multi"]])
    if unique + multi > 1.0 + _SUM_SLACK:
        raise MalformedLine("unique + multi mapped exceed 100%")

    elapsed = 0.0
    if started_at is not None:
        stamp = parse_timestamp(tokens)
        origin = started_at.replace(year=_TIMESTAMP_YEAR)
        elapsed = (stamp - origin).total_seconds()
        if elapsed < 0:
            raise MalformedLine("timestamp precedes alignment start")
    return ProgressSample(elapsed, reads, unique, multi)


def iter_progress_samples(
    lines: Iterable[str],
    column_map: Optional[Mapping[str, int]] = None,
    started_at: Optional[datetime] = None,
) -> Iterator[ProgressSample]:
    """Yield samples from a log, skipping unparseable lines.

    If *started_at* is None the first line with a valid timestamp becomes the
    time origin.
    """
    origin = started_at
    for line in lines:
        if origin is None:
            try:
                tokens = line.split()
                parse_progress_line(line, column_map)
                origin = parse_timestamp(tokens)
            except MalformedLine:
                continue
        try:
            yield parse_progress_line(line, column_map, origin)
        except MalformedLine:
            continue


def mapping_rate(sample: ProgressSample) -> float:
    """Intermediate mapping rate: unique plus multi-mapped, clamped to [0, 1]."""
    return min(1.0, max(0.0, sample.pct_unique_mapped + sample.pct_multi_mapped))


def evaluate(
    policy: EarlyStopPolicy,
    sample: ProgressSample,
    expected_total_reads: Optional[int],
) -> StopDecision:
    rate = mapping_rate(sample)
    if not expected_total_reads or expected_total_reads <= 0:
        return StopDecision(Verdict.INDETERMINATE, rate, None, "expected read count unknown")
    processed = min(1.0, sample.reads_processed / expected_total_reads)
    if processed < policy.min_processed_fraction:
        return StopDecision(
            Verdict.CONTINUE, rate, processed,
            f"processed {processed:.1%} < minimum {policy.min_processed_fraction:.1%}",
        )
    if rate < policy.threshold:
        return StopDecision(
            Verdict.TERMINATE, rate, processed,
            f"mapping rate {rate:.1%} below threshold {policy.threshold:.1%}",
        )
    return StopDecision(Verdict.CONTINUE, rate, processed, "mapping rate above threshold")


def supervise(
    samples: Iterable[ProgressSample],
    policy: EarlyStopPolicy,
    expected_total_reads: Optional[int],
) -> tuple[StopDecision, float]:
    """Apply *policy* to a sample stream.

    Returns the first Terminate decision with the processed fraction at that
    point, or the last decision with a consumed fraction of 1.0.
    """
    decision = StopDecision(Verdict.INDETERMINATE, None, None, "no samples")
    for sample in samples:
        decision = evaluate(policy, sample, expected_total_reads)
        if decision.terminate:
            return decision, decision.processed_fraction
    return decision, 1.0


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    total_align_time: float
    terminated_count: int


def sweep_thresholds(
    streams: Sequence[tuple[Sequence[ProgressSample], Optional[int], float]],
    thresholds: Iterable[float],
    min_processed_fraction: float = 0.10,
) -> list[SweepRow]:
    """Total alignment time per threshold.

    Each stream is ``(samples, expected_total_reads, full_duration_seconds)``;
    a terminated stream costs its consumed fraction of the full duration.
    """
    rows = []
    for threshold in thresholds:
        policy = EarlyStopPolicy(threshold=threshold, min_processed_fraction=min_processed_fraction)
        total = 0.0
        terminated = 0
        for samples, expected, duration in streams:
            decision, consumed = supervise(samples, policy, expected)
            total += consumed * duration
            terminated += decision.terminate
        rows.append(SweepRow(threshold, total, terminated))
    return rows
