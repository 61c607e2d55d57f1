"""One test group per acceptance criterion.

The conftest hook prints a PASS/FAIL line per criterion at the end of the run.
"""

import csv
import hashlib
import io
import math
import random
import time

import pytest

from alignfleet import cli
from alignfleet.executor import TrajectorySpec, synth_progress
from alignfleet.perf import amdahl_speedup, efficiency, fit_parallel_fraction, invert_speedup
from alignfleet.progress import MalformedLine, parse_progress_line, iter_progress_samples, sweep_thresholds
from alignfleet.queue import Status
from alignfleet.sim import (
    FleetTrace,
    InterruptionModel,
    Pricing,
    SimScenario,
    WorkloadModel,
    cost_of,
    generate_workload,
    load_scenario,
    simulate,
    simulate_with_ledger,
)
from alignfleet.perf import InstanceType

from oracles import (
    amdahl,
    brute_force_consumed,
    final_status_from_rows,
    invert,
    rows_from_trace,
    wasted_seconds_from_rows,
)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


# 1 ---------------------------------------------------------------------------


@pytest.mark.acceptance(1)
def test_instance_table(capsys):
    start = time.perf_counter()
    code, out, _ = run_cli(capsys, "analyze", "instances")
    elapsed = time.perf_counter() - start
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    totals = {r["name"]: float(r["total_cost"]) for r in rows}
    expected = {"r6a.2xlarge": 3.63, "r6i.2xlarge": 4.05, "r7a.2xlarge": 3.33, "r7i.2xlarge": 4.05}
    for name, value in expected.items():
        assert abs(totals[name] - value) <= 0.01 + 1e-9, name
    assert rows[0]["name"] == "r7a.2xlarge" and rows[0]["rank"] == "1"
    assert elapsed < 1.0


# 2 ---------------------------------------------------------------------------


@pytest.mark.acceptance(2)
def test_transfer_cost_per_worker():
    trace = FleetTrace()
    trace.emit(0.0, "w0", "WorkerStart", slot=0, generation=0, replaces=None)
    trace.emit(10.0, "w0", "WorkerStop")
    cost = cost_of(trace, Pricing(transfer_price_per_gb=0.01), 0.6086, 29.5)
    assert cost.transfer == pytest.approx(0.317, abs=0.02)
    # same figure per instance in a fleet run
    sc = SimScenario(fleet_size=10, instance=InstanceType("r7a.2xlarge", 8, 8, 64, 0.6086),
                     tasks=generate_workload(WorkloadModel(n_tasks=30), 0))
    _, s = simulate(sc)
    assert s.cost.transfer / s.instances_started == pytest.approx(0.317, abs=0.02)


# 3 ---------------------------------------------------------------------------


def _unit_streams(rates):
    """Unit-duration tasks sampled at every 10% of progress, no noise."""
    streams = []
    checkpoints = []
    for rate in rates:
        spec = TrajectorySpec(rate, 100.0, 1000, noise_std=0.0)
        samples = synth_progress(spec, 1.0)
        streams.append((samples, 1000, 1.0))
        checkpoints.append([(s.reads_processed / 1000, rate) for s in samples])
    return streams, checkpoints


def _trajectory_csv(path, rates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sra_id", "final_mapping_rate", "total_reads", "duration_seconds", "noise_std"])
        for i, rate in enumerate(rates):
            w.writerow([f"T{i}", rate, 1000, 1.0, 0])


@pytest.mark.acceptance(3)
def test_constructed_18_percent(capsys, tmp_path):
    rates = [0.10] * 20 + [0.90] * 80
    streams, checkpoints = _unit_streams(rates)
    (row,) = sweep_thresholds(streams, [0.30], 0.10)
    oracle = sum(brute_force_consumed(c, 0.30, 0.10) for c in checkpoints)
    assert oracle == pytest.approx(82.0)
    assert row.total_align_time == pytest.approx(oracle, rel=1e-12)
    saving = 1 - row.total_align_time / 100.0
    assert abs(saving - 0.18) <= 0.005
    assert row.terminated_count == 20

    path = tmp_path / "t.csv"
    _trajectory_csv(path, rates)
    code, out, _ = run_cli(capsys, "sweep-threshold", "--trajectories", str(path),
                           "--thresholds", "0,0.3", "--poll-interval", "0.1")
    assert code == 0
    got = {float(r["threshold"]): float(r["total_align_time"]) for r in csv.DictReader(io.StringIO(out))}
    assert got[0.0] == pytest.approx(100.0)
    assert abs((1 - got[0.3] / 100.0) - 0.18) <= 0.005


@pytest.mark.acceptance(3)
def test_constructed_60_percent(capsys, tmp_path):
    # two thirds of the tasks map at 50%; at threshold 0.8 each stops at 10%
    rates = [0.50] * 60 + [0.90] * 30
    streams, checkpoints = _unit_streams(rates)
    rows = sweep_thresholds(streams, [0.3, 0.8], 0.10)
    oracle = sum(brute_force_consumed(c, 0.80, 0.10) for c in checkpoints)
    saving = 1 - rows[1].total_align_time / 90.0
    assert rows[1].total_align_time == pytest.approx(oracle, rel=1e-12)
    assert abs(saving - 0.60) <= 0.01
    assert rows[0].total_align_time == pytest.approx(90.0)

    path = tmp_path / "t.csv"
    _trajectory_csv(path, rates)
    code, out, _ = run_cli(capsys, "sweep-threshold", "--trajectories", str(path),
                           "--thresholds", "0.8", "--poll-interval", "0.1")
    (r,) = list(csv.DictReader(io.StringIO(out)))
    assert abs((1 - float(r["total_align_time"]) / 90.0) - 0.60) <= 0.01
    assert int(r["terminated_count"]) == 60


# 4 ---------------------------------------------------------------------------


@pytest.mark.acceptance(4)
def test_threshold_monotonicity_100_sets():
    thresholds = [i / 10 for i in range(11)]
    for seed in range(100):
        trajectories = cli.random_trajectories(12, seed)
        rows = cli.sweep_rows(trajectories, thresholds, 0.10, poll=60.0)
        totals = [r.total_align_time for r in rows]
        assert all(b <= a for a, b in zip(totals, totals[1:])), seed
        baseline = 0.0
        for _, duration in trajectories:
            baseline += 1.0 * duration
        assert totals[0] == baseline
        assert rows[0].terminated_count == 0


# 5 ---------------------------------------------------------------------------


def _schedule(seed):
    rng = random.Random(seed)
    fleet = rng.randint(2, 8)
    if seed % 2:
        interruption = InterruptionModel(poisson_rate_per_instance_hour=rng.uniform(0.05, 1.0))
    else:
        trace = [(rng.randrange(fleet), rng.uniform(0, 20_000)) for _ in range(rng.randint(1, 12))]
        interruption = InterruptionModel(trace=trace)
    return SimScenario(
        fleet_size=fleet, instance=InstanceType("r7a.2xlarge", 8, 8, 64, 0.6086),
        tasks=generate_workload(WorkloadModel(n_tasks=rng.randint(20, 80)), seed),
        interruption=interruption, seed=seed, per_worker_bandwidth_gib_s=0.25,
        failure_probability=rng.choice([0.0, 0.0, 0.05, 0.3]),
    )


@pytest.mark.acceptance(5)
def test_exactly_once_under_interruptions():
    start = time.perf_counter()
    poisson = trace_mode = 0
    for seed in range(120):
        sc = _schedule(seed)
        poisson += sc.interruption.poisson_rate_per_instance_hour is not None
        trace_mode += bool(sc.interruption.trace)
        trace, summary, ledger = simulate_with_ledger(sc)
        rows = rows_from_trace(trace)
        ids = {t.sra_id for t in sc.tasks}
        status, completions = final_status_from_rows(rows)
        # every task ends completed or failed; none lost
        assert {k for k, v in status.items() if v} == ids, seed
        latest = ledger.latest_records()
        assert set(latest) == ids
        for sra_id, rec in latest.items():
            assert rec.status.value == status[sra_id], (seed, sra_id)
        # no duplicates
        assert all(n == 1 for n in completions.values())
        done = [r for r in ledger.records() if r.status is Status.COMPLETED]
        assert len(done) == len({r.sra_id for r in done})
        assert summary.duplicate_completions == 0
        # waste accounting against the independent oracle
        expected = wasted_seconds_from_rows(rows)
        assert math.isclose(summary.wasted_seconds, expected, rel_tol=1e-9, abs_tol=1e-9), seed
    assert poisson >= 50 and trace_mode >= 50
    assert time.perf_counter() - start < 60.0


# 6 ---------------------------------------------------------------------------


@pytest.mark.acceptance(6)
@pytest.mark.parametrize("name,minutes", [("spot_1000.toml", 8.3), ("spot_1000_nfs14.toml", 14.0)])
def test_spot_experiment_shape(fixtures_dir, name, minutes):
    sc = load_scenario(fixtures_dir / name)
    assert sc.fleet_size == 50 and len(sc.tasks) == 1000
    _, s = simulate(sc)
    assert s.interruptions == 5
    assert s.files_completed + s.files_failed == 1000
    assert s.wasted_fraction < 0.01
    assert s.init_phase_seconds / 60.0 == pytest.approx(minutes, rel=0.05)


# 7 ---------------------------------------------------------------------------


@pytest.mark.acceptance(7)
def test_amdahl_round_trip():
    rng = random.Random(7)
    for _ in range(200):
        p = rng.random()
        threads = rng.sample(range(2, 65), rng.randint(1, 6))
        points = [(t, amdahl(p, t)) for t in threads]
        assert abs(fit_parallel_fraction(points) - p) <= 1e-6
    for p in (0.0, 1.0):
        assert abs(fit_parallel_fraction([(4, amdahl(p, 4)), (8, amdahl(p, 8))]) - p) <= 1e-6


@pytest.mark.acceptance(7)
def test_reported_efficiency_inversion():
    p_small = invert_speedup(16, 0.84 * 16)
    p_large = invert_speedup(16, 0.72 * 16)
    assert p_small == pytest.approx(invert(16, 0.84 * 16), rel=1e-12)
    assert abs(p_small - 0.9873) <= 1e-3
    assert abs(p_large - 0.9741) <= 1e-3
    assert abs(fit_parallel_fraction([(16, 0.84 * 16)]) - 0.9873) <= 1e-3


@pytest.mark.acceptance(7)
def test_efficiency_strictly_decreasing():
    for p in (0.0, 0.3, 0.9, 0.9741, 0.9873, 0.999999):
        eff = [efficiency(p, t) for t in range(1, 129)]
        assert all(b < a for a, b in zip(eff, eff[1:])), p
        smt = [amdahl_speedup(p, t, physical_cores=8) / t for t in range(1, 33)]
        assert all(b < a for a, b in zip(smt, smt[1:])), p


# 8 ---------------------------------------------------------------------------


@pytest.mark.acceptance(8)
@pytest.mark.parametrize("name", ["spot_1000.toml", "spot_1000_nfs14.toml", "large_1to10.toml"])
def test_byte_identical_traces(capsys, fixtures_dir, tmp_path, name):
    digests = []
    for run in ("a", "b"):
        code, _, _ = run_cli(capsys, "simulate", str(fixtures_dir / name), "--seed", "1",
                             "--out", str(tmp_path / run))
        assert code == 0
        digests.append(hashlib.sha256((tmp_path / run / "trace.csv").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


# 9 ---------------------------------------------------------------------------


def _mutate(line, rng):
    ops = rng.randint(1, 4)
    chars = list(line)
    for _ in range(ops):
        kind = rng.randrange(8)
        if kind == 0 and chars:
            del chars[rng.randrange(len(chars))]
        elif kind == 1:
            chars.insert(rng.randrange(len(chars) + 1), chr(rng.randrange(0x20, 0x7F)))
        elif kind == 2 and chars:
            chars[rng.randrange(len(chars))] = chr(rng.randrange(0, 0x3000))
        elif kind == 3:
            chars = chars[:rng.randrange(len(chars) + 1)]
        elif kind == 4:
            tokens = "".join(chars).split()
            if len(tokens) > 1:
                i, j = rng.randrange(len(tokens)), rng.randrange(len(tokens))
                tokens[i], tokens[j] = tokens[j], tokens[i]
            chars = list("  ".join(tokens))
        elif kind == 5:
            tokens = "".join(chars).split()
            if tokens:
                tokens[rng.randrange(len(tokens))] = rng.choice(
                    ["nan", "inf", "-1", "1e309", "%", "", "999999999999999999999", "150%", "0x10", "١٢٣"])
            chars = list(" ".join(tokens))
        elif kind == 6:
            chars = chars + chars
        else:
            chars = list(rng.choice(["\x00", "\t", "\r", "\n", "﻿", "  "])) + chars
    return "".join(chars)


@pytest.mark.acceptance(9)
def test_fuzzed_progress_lines(fixtures_dir):
    with open(fixtures_dir / "progress" / "star_2.7_Log.progress.out", encoding="utf-8") as fh:
        corpus = fh.read().splitlines()
    rng = random.Random(9)
    parsed = rejected = 0
    for _ in range(12_000):
        line = _mutate(rng.choice(corpus), rng)
        try:
            s = parse_progress_line(line)
        except MalformedLine:
            rejected += 1
            continue
        parsed += 1
        assert s.reads_processed >= 0
        assert 0.0 <= s.pct_unique_mapped + s.pct_multi_mapped <= 1.0 + 1e-9
    assert parsed + rejected == 12_000
    assert parsed > 0 and rejected > 0
    # whole mutated files go through the iterator without raising
    for _ in range(200):
        list(iter_progress_samples([_mutate(l, rng) for l in corpus]))


@pytest.mark.acceptance(9)
def test_fixture_lines_parse(fixtures_dir):
    with open(fixtures_dir / "progress" / "star_2.7_Log.progress.out", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    with open(fixtures_dir / "progress" / "expected.csv", newline="") as fh:
        expected = list(csv.DictReader(fh))
    samples = list(iter_progress_samples(lines))
    assert len(samples) == len(expected)
    for s, row in zip(samples, expected):
        direct = parse_progress_line(lines[int(row["line"]) - 1])
        assert direct.reads_processed == s.reads_processed == int(row["reads_processed"])
        assert s.pct_unique_mapped == pytest.approx(float(row["pct_unique"]))
        assert s.pct_multi_mapped == pytest.approx(float(row["pct_multi"]))
        assert s.elapsed_seconds == float(row["elapsed_seconds"])
    for header in lines[:2] + lines[-1:]:
        with pytest.raises(MalformedLine):
            parse_progress_line(header)


# 10 --------------------------------------------------------------------------


@pytest.mark.acceptance(10)
def test_rerun_is_noop(capsys, fixtures_dir, tmp_path):
    import json

    manifest = str(fixtures_dir / "demo_manifest.csv")
    out = tmp_path / "run"
    code, first, _ = run_cli(capsys, "run", "--manifest", manifest, "--out", str(out), "--workers", "3")
    assert code == 0
    assert json.loads(first)["tasks_completed"] == 10
    ledger_before = (out / "ledger.jsonl").read_text()
    code, second, _ = run_cli(capsys, "run", "--manifest", manifest, "--out", str(out), "--workers", "3")
    assert code == 0
    summary = json.loads(second)
    assert summary["processed"] == 0 and summary["enqueued"] == 0
    assert json.loads((out / "summary.json").read_text())["processed"] == 0
    assert (out / "ledger.jsonl").read_text() == ledger_before
