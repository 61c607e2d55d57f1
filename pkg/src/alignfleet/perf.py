"""Thread scaling, alignment duration and instance cost models."""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from scipy.optimize import minimize_scalar

GIB = 1024**3
# Files below this size use the small-file parallel fraction.
SIZE_CLASS_BOUNDARY_BYTES = 5 * GIB

PRICING_FIELDS = ("name", "vcpus", "cores", "ram_gib", "price_per_hour")


class DomainError(ValueError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class InstanceType:
    name: str
    vcpus: int
    physical_cores: int
    ram_gib: float
    on_demand_price_per_hour: float
    smt: Optional[bool] = None
    spot_discount: tuple[float, float] = (0.50, 0.60)

    def __post_init__(self) -> None:
        if self.vcpus < self.physical_cores or self.physical_cores < 1:
            raise ValueError(f"{self.name}: need vcpus >= physical_cores >= 1")
        derived = self.vcpus > self.physical_cores
        if self.smt is None:
            object.__setattr__(self, "smt", derived)
        elif self.smt != derived:
            raise ValueError(f"{self.name}: smt={self.smt} inconsistent with vcpus/cores")
        lo, hi = self.spot_discount
        if not 0.0 <= lo <= hi < 1.0:
            raise ValueError(f"{self.name}: bad spot_discount range {self.spot_discount}")

    def spot_price_per_hour(self, discount: Optional[float] = None) -> float:
        if discount is None:
            discount = sum(self.spot_discount) / 2
        return self.on_demand_price_per_hour * (1.0 - discount)


def effective_threads(t: float, physical_cores: Optional[int] = None, smt_penalty: float = 1.0) -> float:
    """Threads past the physical core count count for *smt_penalty* each."""
    if physical_cores is None or t <= physical_cores:
        return t
    return physical_cores + smt_penalty * (t - physical_cores)


def amdahl_speedup(
    p: float,
    t: float,
    physical_cores: Optional[int] = None,
    smt_penalty: float = 0.55,
) -> float:
    if t < 1:
        raise DomainError(f"thread count must be >= 1, got {t}")
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"parallel fraction must be in [0, 1], got {p}")
    te = effective_threads(t, physical_cores, smt_penalty)
    return 1.0 / ((1.0 - p) + p / te)


def efficiency(p: float, t: float, **kwargs) -> float:
    return amdahl_speedup(p, t, **kwargs) / t


def invert_speedup(t: float, speedup: float) -> float:
    """Parallel fraction that gives exactly *speedup* at *t* threads, clamped to [0, 1]."""
    if t <= 1:
        raise InsufficientData("inversion needs t > 1")
    if speedup <= 0:
        raise DomainError("speedup must be positive")
    p = (1.0 - 1.0 / speedup) / (1.0 - 1.0 / t)
    return min(1.0, max(0.0, p))


def fit_parallel_fraction(points: Iterable[tuple[float, float]]) -> float:
    """Least-squares parallel fraction for measured ``(threads, speedup)`` points.

    Points at one thread carry no information and are ignored.  A single
    informative point is inverted exactly.
    """
    usable = [(float(t), float(s)) for t, s in points if t > 1]
    if not usable:
        raise InsufficientData("need at least one point with more than one thread")
    if len(usable) == 1:
        return invert_speedup(*usable[0])

    def sse(p: float) -> float:
        return sum((1.0 / ((1.0 - p) + p / t) - s) ** 2 for t, s in usable)

    res = minimize_scalar(sse, bounds=(0.0, 1.0), method="bounded",
                          options={"xatol": 1e-12, "maxiter": 500})
    p = float(res.x)
    # Bounded Brent never evaluates the endpoints exactly.
    return min((0.0, p, 1.0), key=sse)


@dataclass
class ScalingModel:
    """Amdahl speedup per file-size class, optionally overridden by
    measured calibration points."""

    p_small: float = 0.9873
    p_large: float = 0.9741
    smt_penalty: float = 0.55
    physical_cores: Optional[int] = None
    calibration_small: list[tuple[float, float]] = field(default_factory=list)
    calibration_large: list[tuple[float, float]] = field(default_factory=list)
    size_boundary_bytes: int = SIZE_CLASS_BOUNDARY_BYTES

    def __post_init__(self) -> None:
        for p in (self.p_small, self.p_large):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"parallel fraction out of range: {p}")
        if not 0.0 < self.smt_penalty <= 1.0:
            raise ValueError("smt_penalty must be in (0, 1]")

    def parallel_fraction(self, size_bytes: float = 0) -> float:
        return self.p_small if size_bytes < self.size_boundary_bytes else self.p_large

    def _calibration(self, size_bytes: float) -> list[tuple[float, float]]:
        pts = self.calibration_small if size_bytes < self.size_boundary_bytes else self.calibration_large
        if not pts:
            return []
        merged = dict(sorted(pts))
        merged.setdefault(1.0, 1.0)
        return sorted(merged.items())

    def speedup(self, threads: float, size_bytes: float = 0) -> float:
        p = self.parallel_fraction(size_bytes)
        pts = self._calibration(size_bytes)
        if not pts:
            return amdahl_speedup(p, threads, self.physical_cores, self.smt_penalty)
        if threads < 1:
            raise DomainError(f"thread count must be >= 1, got {threads}")
        xs = [t for t, _ in pts]
        last_t, last_s = pts[-1]
        if threads >= last_t:
            # Amdahl extrapolation anchored at the last measured point.
            scale = amdahl_speedup(p, threads, self.physical_cores, self.smt_penalty)
            return last_s * scale / amdahl_speedup(p, last_t, self.physical_cores, self.smt_penalty)
        i = bisect.bisect_right(xs, threads)
        (t0, s0), (t1, s1) = pts[i - 1], pts[i]
        return s0 + (s1 - s0) * (threads - t0) / (t1 - t0)

    def efficiency(self, threads: float, size_bytes: float = 0) -> float:
        return self.speedup(threads, size_bytes) / threads


def align_duration(
    model: ScalingModel,
    file_size_bytes: float,
    threads: float,
    base_throughput_bytes_per_thread_second: float,
) -> float:
    """Seconds to align a file: size / (single-thread throughput * speedup)."""
    if file_size_bytes <= 0 or base_throughput_bytes_per_thread_second <= 0:
        raise DomainError("file size and throughput must be positive")
    speedup = model.speedup(threads, file_size_bytes)
    return file_size_bytes / (base_throughput_bytes_per_thread_second * speedup)


@dataclass(frozen=True)
class RankedInstance:
    instance: InstanceType
    hours: float
    total_cost: float


def rank_instances(rows: Iterable[tuple[InstanceType, float]]) -> list[RankedInstance]:
    """Cost = on-demand price x measured hours, cheapest first."""
    ranked = []
    for inst, hours in rows:
        if hours <= 0:
            raise DomainError(f"{inst.name}: hours must be positive")
        ranked.append(RankedInstance(inst, hours, inst.on_demand_price_per_hour * hours))
    ranked.sort(key=lambda r: (r.total_cost, r.hours, r.instance.name))
    return ranked


def read_pricing(path: Union[str, Path]) -> list[tuple[InstanceType, Optional[float]]]:
    """Read a pricing CSV; an optional ``measured_hours`` column is returned
    alongside each instance (None when absent)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in PRICING_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                inst = InstanceType(
                    name=row["name"].strip(),
                    vcpus=int(row["vcpus"]),
                    physical_cores=int(row["cores"]),
                    ram_gib=float(row["ram_gib"]),
                    on_demand_price_per_hour=float(row["price_per_hour"]),
                )
                hours = row.get("measured_hours")
                hours = float(hours) if hours not in (None, "") else None
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.append((inst, hours))
    return out


def recommend_threads(
    model: ScalingModel,
    per_vcpu_price: float,
    fixed_overhead_price: float,
    non_align_fraction: float,
    max_threads: int = 16,
    size_bytes: float = 0,
) -> int:
    """Thread count minimising (fixed + per_vcpu*t) * (T_align/S(t) + T_other).

    Work is normalised so single-threaded alignment plus the other stages
    take one unit, of which *non_align_fraction* does not scale.
    """
    if per_vcpu_price < 0 or fixed_overhead_price < 0:
        raise DomainError("prices must be non-negative")
    if not 0.0 <= non_align_fraction < 1.0:
        raise DomainError("non_align_fraction must be in [0, 1)")
    t_align = 1.0 - non_align_fraction
    best_t, best_cost = 1, math.inf
    for t in range(1, max_threads + 1):
        cost = (fixed_overhead_price + per_vcpu_price * t) * (
            t_align / model.speedup(t, size_bytes) + non_align_fraction
        )
        if cost < best_cost:
            best_t, best_cost = t, cost
    return best_t


def efficiency_curve(model: ScalingModel, max_threads: int, size_bytes: float = 0) -> list[tuple[int, float, float]]:
    """Rows of ``(threads, speedup, efficiency)`` for 1..max_threads."""
    return [(t, model.speedup(t, size_bytes), model.efficiency(t, size_bytes))
            for t in range(1, max_threads + 1)]


def read_scaling_points(path: Union[str, Path]) -> list[tuple[float, float]]:
    """CSV with ``threads`` and either ``speedup`` or ``efficiency`` columns."""
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "threads" not in cols or not ({"speedup", "efficiency"} & set(cols)):
            raise ValueError(f"{path}: need threads and speedup|efficiency columns")
        for lineno, row in enumerate(reader, start=2):
            try:
                t = float(row["threads"])
                if row.get("speedup") not in (None, ""):
                    s = float(row["speedup"])
                else:
                    s = float(row["efficiency"]) * t
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            points.append((t, s))
    return points

