"""Command-line entry point.

Subcommands: run, simulate, sweep-threshold, analyze {instances,scaling},
report timeline.  Exit codes: 0 success, 1 some tasks failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import random
import sys
import threading
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import perf
from .executor import (
    STAGES,
    StageTimeModel,
    SubprocessExecutor,
    SyntheticExecutor,
    TrajectorySpec,
    exec_stage,
    synth_progress,
)
from .progress import EarlyStopPolicy, sweep_thresholds
from .queue import (
    QUEUE_LARGE,
    QUEUE_MAIN,
    QUEUE_SMALL,
    Ledger,
    ManifestError,
    TaskSpec,
    WorkQueue,
    assign_queue,
    read_manifest,
)
from .sim import (
    FleetTrace,
    ScenarioError,
    emit_timeline,
    load_scenario,
    simulate,
    write_outputs,
    write_timeline_csv,
)
from .worker import ResourceEnvelope, Worker, merge_reports

log = logging.getLogger("alignfleet")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("alignfleet") / "fixtures" / name))


def _load_toml(path: Path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# run


@dataclass
class RunConfig:
    mode: str
    manifest_path: Path
    output_dir: Path
    config_path: Optional[Path] = None
    seed: int = 0
    executor: str = "synthetic"
    workers: int = 1
    early_stop: EarlyStopPolicy = field(default_factory=EarlyStopPolicy)
    size_threshold_bytes: Optional[int] = None
    retry_limit: int = 3
    envelope: ResourceEnvelope = field(default_factory=ResourceEnvelope)
    threads: int = 8
    raw: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.manifest_path.is_file():
            raise UsageError(f"manifest not found: {self.manifest_path}")
        if self.config_path is not None and not self.config_path.is_file():
            raise UsageError(f"config not found: {self.config_path}")
        if self.mode == "simulate" and self.seed is None:
            raise UsageError("simulate mode needs a seed")
        if self.workers < 1:
            raise UsageError("--workers must be >= 1")
        if self.executor not in ("synthetic", "subprocess"):
            raise UsageError(f"unknown executor {self.executor!r}")


def build_run_config(args: argparse.Namespace) -> RunConfig:
    if args.manifest is None:
        raise UsageError("--manifest is required")
    raw = _load_toml(Path(args.config)) if args.config else {}
    stop = dict(raw.get("early_stop", {}))
    if args.threshold is not None:
        stop["threshold"] = args.threshold
    if args.min_fraction is not None:
        stop["min_processed_fraction"] = args.min_fraction
    queue_cfg = raw.get("queue", {})
    worker_cfg = raw.get("worker", {})
    threshold = args.size_threshold_bytes if args.size_threshold_bytes is not None \
        else queue_cfg.get("size_threshold_bytes")
    try:
        cfg = RunConfig(
            mode="run",
            manifest_path=Path(args.manifest),
            output_dir=Path(args.out),
            config_path=Path(args.config) if args.config else None,
            seed=args.seed if args.seed is not None else int(raw.get("seed", 0)),
            executor=args.executor or raw.get("executor", "synthetic"),
            workers=args.workers if args.workers is not None else int(worker_cfg.get("workers", 1)),
            early_stop=EarlyStopPolicy(**stop),
            size_threshold_bytes=int(threshold) if threshold is not None else None,
            retry_limit=int(queue_cfg.get("retry_limit", 3)),
            envelope=ResourceEnvelope(**raw.get("envelope", {})),
            threads=int(worker_cfg.get("threads", 8)),
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad configuration: {exc}") from None
    cfg.validate()
    return cfg


def _make_executor(cfg: RunConfig):
    if cfg.executor == "subprocess":
        commands = cfg.raw.get("commands", {})
        unknown = set(commands) - set(STAGES)
        if unknown:
            raise UsageError(f"unknown stages in [commands]: {sorted(unknown)}")
        progress_file = cfg.raw.get("progress", {}).get("file", "{workdir}/Log.progress.out")
        return SubprocessExecutor(commands, progress_file, cfg.raw.get("timeouts", {}))
    syn = cfg.raw.get("synthetic", {})
    return SyntheticExecutor(
        scaling=perf.ScalingModel(**cfg.raw.get("scaling", {})),
        stage_times=StageTimeModel(**syn.get("stages", {})),
        base_throughput=float(syn.get("base_throughput", 1.0e6)),
        seed=cfg.seed,
        noise_std=float(syn.get("noise_std", 0.02)),
        time_scale=float(syn.get("time_scale", 0.0)),
    )


def _index_loader(cfg: RunConfig, index_dir: str):
    worker_cfg = cfg.raw.get("worker", {})
    command = worker_cfg.get("index_load_command")
    if cfg.executor == "subprocess" and command:
        def load() -> float:
            dummy = TaskSpec("index", 0)
            return exec_stage(command, dummy, None, index_dir=index_dir).wall_seconds
        return load
    bandwidth = float(worker_cfg.get("index_bandwidth_gib_s", 0.25))
    return lambda: cfg.envelope.index_size_gib / bandwidth


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_run_config(args)
    try:
        tasks = read_manifest(cfg.manifest_path)
    except ManifestError as exc:
        raise UsageError(str(exc)) from None
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "workers").mkdir(exist_ok=True)

    ledger = Ledger(out / "ledger.jsonl")
    if cfg.size_threshold_bytes is None:
        queue_ids = [QUEUE_MAIN]
    else:
        queue_ids = [QUEUE_SMALL, QUEUE_LARGE]
    queues = {qid: WorkQueue(qid, out / f"queue-{qid}.journal") for qid in queue_ids}
    for q in queues.values():
        recovered = q.recover_leases()
        if recovered:
            log.info("%s: released %d leases left by a previous run", q.name, recovered)
    pending = set().union(*(q.pending_ids() for q in queues.values()))
    enqueued = 0
    for task in tasks:
        if ledger.already_processed(task.sra_id) or task.sra_id in pending:
            continue
        queues[assign_queue(task, cfg.size_threshold_bytes)].enqueue(task)
        enqueued += 1
    log.info("enqueued %d of %d manifest tasks", enqueued, len(tasks))

    executor = _make_executor(cfg)
    worker_cfg = cfg.raw.get("worker", {})
    queue_cfg = cfg.raw.get("queue", {})
    index_dir = worker_cfg.get("index_dir", "")
    workdir_root = Path(worker_cfg.get("workdir_root", out / "work"))
    large_workers = int(queue_cfg.get("large_workers", 1)) if cfg.size_threshold_bytes else 0
    large_disk = float(queue_cfg.get("large_disk_capacity_gib", cfg.envelope.disk_capacity_gib))

    workers = []
    for i in range(cfg.workers):
        envelope = cfg.envelope
        order = None
        if cfg.size_threshold_bytes is not None:
            if i < large_workers:
                order = [QUEUE_LARGE, QUEUE_SMALL]
                envelope = ResourceEnvelope(**{**vars(cfg.envelope), "disk_capacity_gib": large_disk})
            else:
                order = [QUEUE_SMALL]
        workers.append(Worker(
            f"worker-{i}", queues, ledger, executor, cfg.early_stop, envelope,
            queue_order=order, threads=cfg.threads, retry_limit=cfg.retry_limit,
            visibility_seconds=float(queue_cfg.get("visibility_seconds", 3600.0)),
            workdir_root=workdir_root, index_dir=index_dir,
            index_loader=_index_loader(cfg, index_dir),
            heartbeat=cfg.executor == "subprocess", idle_poll_seconds=0.05,
        ))

    threads = [threading.Thread(target=w.run, name=w.worker_id) for w in workers]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for q in queues.values():
        q.close()
    ledger.close()

    reports = [w.report for w in workers]
    for r in reports:
        (out / "workers" / f"{r.worker_id}.json").write_text(r.to_json() + "\n")
    summary = merge_reports(reports)
    summary["enqueued"] = enqueued
    summary["manifest_tasks"] = len(tasks)
    summary["processed"] = summary["tasks_completed"] + summary["tasks_failed"]
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(json.dumps({k: summary[k] for k in ("enqueued", "processed", "tasks_completed", "tasks_failed",
                                              "tasks_terminated_early", "tasks_skipped")}, sort_keys=True))
    return EXIT_PARTIAL if summary["tasks_failed"] else EXIT_OK


# --------------------------------------------------------------------------
# simulate


def cmd_simulate(args: argparse.Namespace) -> int:
    path = args.scenario or args.config
    if path is None:
        raise UsageError("a scenario file is required")
    if not Path(path).is_file():
        raise UsageError(f"scenario not found: {path}")
    try:
        scenario = load_scenario(path, seed=args.seed)
    except (ScenarioError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    trace, summary = simulate(scenario)
    paths = write_outputs(args.out, trace, summary, bucket_seconds=args.bucket)
    print(json.dumps({"summary": str(paths["summary"]), "files_completed": summary.files_completed,
                      "interruptions": summary.interruptions,
                      "wasted_fraction": round(summary.wasted_fraction, 6),
                      "node_hours": round(summary.node_hours, 3),
                      "total_cost": round(summary.cost.total, 2)}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep-threshold


TRAJECTORY_FIELDS = ("sra_id", "final_mapping_rate", "total_reads", "duration_seconds")


def read_trajectories(path: Path) -> list[tuple[TrajectorySpec, float]]:
    """CSV of trajectory specs; optional columns noise_std, seed, shape."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in TRAJECTORY_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise UsageError(f"{path}: missing columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            try:
                total = int(row["total_reads"])
                duration = float(row["duration_seconds"])
                spec = TrajectorySpec(
                    final_mapping_rate=float(row["final_mapping_rate"]),
                    read_speed_reads_per_second=total / duration,
                    total_reads=total,
                    noise_std=float(row.get("noise_std") or 0.0),
                    seed=int(row.get("seed") or lineno),
                    shape=row.get("shape") or "constant",
                )
            except (TypeError, ValueError, ZeroDivisionError) as exc:
                raise UsageError(f"{path}:{lineno}: {exc}") from None
            out.append((spec, duration))
    return out


def random_trajectories(n: int, seed: int) -> list[tuple[TrajectorySpec, float]]:
    rng = random.Random(seed)
    out = []
    for i in range(n):
        duration = rng.uniform(120.0, 3600.0)
        total = rng.randint(1_000_000, 60_000_000)
        out.append((TrajectorySpec(
            final_mapping_rate=rng.random(),
            read_speed_reads_per_second=total / duration,
            total_reads=total,
            noise_std=rng.choice((0.0, 0.02, 0.05)),
            seed=rng.getrandbits(32),
        ), duration))
    return out


def sweep_rows(trajectories, thresholds, min_fraction: float, poll: float):
    streams = [(synth_progress(spec, poll), spec.total_reads, duration) for spec, duration in trajectories]
    return sweep_thresholds(streams, thresholds, min_fraction)


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad number list: {text!r}") from None


def cmd_sweep_threshold(args: argparse.Namespace) -> int:
    if args.trajectories:
        trajectories = read_trajectories(Path(args.trajectories))
    elif args.random:
        trajectories = random_trajectories(args.random, args.seed or 0)
    else:
        raise UsageError("give --trajectories CSV or --random N")
    if not trajectories:
        raise UsageError("empty trajectory set")
    thresholds = _parse_floats(args.thresholds)
    if not thresholds:
        raise UsageError("empty threshold list")
    rows = sweep_rows(trajectories, thresholds, args.min_fraction, args.poll_interval)
    with _output(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("threshold", "total_align_time", "terminated_count"))
        for r in rows:
            writer.writerow((r.threshold, f"{r.total_align_time:.6f}", r.terminated_count))
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze


class _output:
    def __init__(self, path: Optional[str]) -> None:
        self.path = path

    def __enter__(self):
        if self.path in (None, "-"):
            return sys.stdout
        self._fh = open(self.path, "w", newline="")
        return self._fh

    def __exit__(self, *exc) -> None:
        if self.path not in (None, "-"):
            self._fh.close()


def cmd_analyze_instances(args: argparse.Namespace) -> int:
    path = Path(args.pricing) if args.pricing else fixture_path("instances.csv")
    try:
        rows = perf.read_pricing(path)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    missing = [inst.name for inst, hours in rows if hours is None]
    if missing:
        raise UsageError(f"{path}: measured_hours missing for {missing}")
    ranked = perf.rank_instances(rows)
    with _output(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("rank", "name", "vcpus", "cores", "ram_gib", "price_per_hour", "hours", "total_cost"))
        for i, r in enumerate(ranked, start=1):
            inst = r.instance
            writer.writerow((i, inst.name, inst.vcpus, inst.physical_cores, inst.ram_gib,
                             inst.on_demand_price_per_hour, r.hours, f"{r.total_cost:.2f}"))
    return EXIT_OK


def _parse_point(text: str, as_efficiency: bool) -> tuple[float, float]:
    try:
        t, v = (float(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"bad point {text!r}, expected THREADS:VALUE") from None
    return (t, v * t) if as_efficiency else (t, v)


def cmd_analyze_scaling(args: argparse.Namespace) -> int:
    points = []
    if args.points:
        try:
            points += perf.read_scaling_points(args.points)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    points += [_parse_point(p, False) for p in args.point or []]
    points += [_parse_point(p, True) for p in args.efficiency_point or []]
    try:
        p = perf.fit_parallel_fraction(points)
    except perf.InsufficientData as exc:
        print(f"InsufficientData: {exc}", file=sys.stderr)
        return EXIT_USAGE
    model = perf.ScalingModel(p_small=p, p_large=p, smt_penalty=args.smt_penalty,
                              physical_cores=args.physical_cores)
    best = perf.recommend_threads(model, args.per_vcpu_price, args.fixed_price,
                                  args.non_align_fraction, max_threads=args.max_threads)
    print(f"parallel_fraction={p:.6f}")
    print(f"recommended_threads={best}")
    with _output(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("threads", "speedup", "efficiency"))
        for t, s, e in perf.efficiency_curve(model, args.max_threads):
            writer.writerow((t, f"{s:.6f}", f"{e:.6f}"))
    return EXIT_OK


# --------------------------------------------------------------------------
# report


def cmd_report_timeline(args: argparse.Namespace) -> int:
    try:
        with open(args.trace, newline="", encoding="utf-8") as fh:
            trace = FleetTrace.read_csv(fh)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read trace: {exc}") from None
    with _output(args.out) as fh:
        write_timeline_csv(emit_timeline(trace, args.bucket), fh)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alignfleet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="process a manifest with local workers")
    p.add_argument("--manifest")
    p.add_argument("--config")
    p.add_argument("--out", default="alignfleet-out")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--executor", choices=("synthetic", "subprocess"))
    p.add_argument("--threshold", type=float)
    p.add_argument("--min-fraction", type=float)
    p.add_argument("--size-threshold-bytes", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="simulate a spot fleet from a scenario file")
    p.add_argument("scenario", nargs="?")
    p.add_argument("--config", help="scenario file (alternative to the positional argument)")
    p.add_argument("--out", default="sim-out")
    p.add_argument("--seed", type=int)
    p.add_argument("--bucket", type=float, default=300.0, help="timeline bucket seconds")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-threshold", help="total align time versus early-stop threshold")
    p.add_argument("--trajectories")
    p.add_argument("--random", type=int, help="generate N random trajectories")
    p.add_argument("--seed", type=int)
    p.add_argument("--thresholds", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--min-fraction", type=float, default=0.10)
    p.add_argument("--poll-interval", type=float, default=30.0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_threshold)

    p = sub.add_parser("analyze", help="instance ranking and scaling analysis")
    asub = p.add_subparsers(dest="what", required=True)
    a = asub.add_parser("instances")
    a.add_argument("--pricing", help="pricing CSV with measured_hours (default: bundled table)")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze_instances)
    a = asub.add_parser("scaling")
    a.add_argument("--points", help="CSV with threads and speedup|efficiency")
    a.add_argument("--point", action="append", help="THREADS:SPEEDUP")
    a.add_argument("--efficiency-point", action="append", help="THREADS:EFFICIENCY")
    a.add_argument("--max-threads", type=int, default=16)
    a.add_argument("--physical-cores", type=int)
    a.add_argument("--smt-penalty", type=float, default=0.55)
    a.add_argument("--per-vcpu-price", type=float, default=0.6086 / 8)
    a.add_argument("--fixed-price", type=float, default=0.0)
    a.add_argument("--non-align-fraction", type=float, default=0.29)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze_scaling)

    p = sub.add_parser("report", help="derived reports")
    rsub = p.add_subparsers(dest="what", required=True)
    r = rsub.add_parser("timeline")
    r.add_argument("--trace", required=True)
    r.add_argument("--bucket", type=float, default=300.0)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report_timeline)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    level = os.environ.get("ALIGNFLEET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"alignfleet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
