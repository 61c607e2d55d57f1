import csv
import io
import json
import subprocess
import sys

import pytest

from alignfleet import cli

from oracles import amdahl
from alignfleet.queue import Ledger, read_ledger
from alignfleet.sim import FleetTrace, read_summary, read_timeline_csv
from alignfleet.worker import WorkerReport


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_missing_manifest(capsys, tmp_path):
    code, _, err = run(capsys, "run", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path))
    assert code == 2 and "manifest not found" in err
    code, _, err = run(capsys, "run", "--out", str(tmp_path))
    assert code == 2


def test_bad_config(capsys, tmp_path, fixtures_dir):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[early_stop]\nthreshold = 3.0\n")
    code, _, err = run(capsys, "run", "--manifest", str(fixtures_dir / "demo_manifest.csv"),
                       "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 2 and "threshold" in err
    cfg.write_text("not toml [")
    code, _, _ = run(capsys, "run", "--manifest", str(fixtures_dir / "demo_manifest.csv"),
                     "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 2


def test_bad_manifest(capsys, tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("sra_id,size_bytes,expected_reads,tissue\nA,5,1,x\n")
    code, _, err = run(capsys, "run", "--manifest", str(m), "--out", str(tmp_path / "o"))
    assert code == 2 and "admission" in err


def test_run_outputs_round_trip(capsys, tmp_path, fixtures_dir):
    out = tmp_path / "o"
    code, _, _ = run(capsys, "run", "--manifest", str(fixtures_dir / "demo_manifest.csv"), "--out", str(out),
                     "--workers", "2", "--threshold", "0.5", "--seed", "3")
    assert code == 0
    records = read_ledger(out / "ledger.jsonl")
    done = [r for r in records if r.status.value == "completed"]
    assert len(done) == 10
    early = {r.sra_id for r in done if r.terminated_early}
    assert {"SRR0000003", "SRR0000008"} <= early
    assert all(r.final_mapping_rate < 0.5 for r in done if r.terminated_early)
    reports = [WorkerReport.from_dict(json.loads(p.read_text())) for p in (out / "workers").glob("*.json")]
    assert sum(r.tasks_completed for r in reports) == 10
    summary = json.loads((out / "summary.json").read_text())
    assert summary["tasks_completed"] == 10 and summary["workers"] == 2


def test_run_partial_failure_exit_1(capsys, tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("sra_id,size_bytes,expected_reads,tissue,final_mapping_rate,fastq_expansion,sort_memory_gib\n"
                 "OK,300000000,1000,x,0.9,,\n"
                 "OOM,300000000,1000,x,0.9,,60\n")
    code, out, _ = run(capsys, "run", "--manifest", str(m), "--out", str(tmp_path / "o"))
    assert code == 1
    assert json.loads(out)["tasks_failed"] == 1
    led = Ledger(tmp_path / "o" / "ledger.jsonl")
    assert led.already_processed("OK") and not led.already_processed("OOM")
    # failed tasks are retried on the next run
    code, out, _ = run(capsys, "run", "--manifest", str(m), "--out", str(tmp_path / "o"))
    assert json.loads(out)["enqueued"] == 1 and code == 1


def test_run_double_queue(capsys, tmp_path, fixtures_dir):
    code, out, _ = run(capsys, "run", "--manifest", str(fixtures_dir / "demo_manifest.csv"),
                       "--out", str(tmp_path / "o"), "--workers", "3",
                       "--size-threshold-bytes", str(5 * 1024**3))
    assert code == 0 and json.loads(out)["tasks_completed"] == 10
    assert (tmp_path / "o" / "queue-small.journal").exists()
    assert (tmp_path / "o" / "queue-large.journal").exists()


def test_run_subprocess_executor(capsys, tmp_path, fixtures_dir):
    cfg = tmp_path / "c.toml"
    cfg.write_text(
        'executor = "subprocess"\n'
        "[worker]\nworkers = 2\n"
        '[commands]\nPrefetch = "true"\nConvert = "true"\nAlign = "true"\n'
        'SortNormalize = "true"\nUpload = "sh -c \'test -n {sra_id}\'"\n'
    )
    code, out, _ = run(capsys, "run", "--manifest", str(fixtures_dir / "demo_manifest.csv"),
                       "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 0 and json.loads(out)["tasks_completed"] == 10


def test_run_subprocess_failing_stage(capsys, tmp_path, fixtures_dir):
    cfg = tmp_path / "c.toml"
    cfg.write_text('executor = "subprocess"\n[queue]\nretry_limit = 2\n[commands]\nConvert = "false"\n')
    code, out, _ = run(capsys, "run", "--manifest", str(fixtures_dir / "demo_manifest.csv"),
                       "--config", str(cfg), "--out", str(tmp_path / "o"))
    summary = json.loads(out)
    assert code == 1 and summary["tasks_failed"] == 10 and summary["tasks_completed"] == 0


def test_simulate_outputs(capsys, tmp_path, fixtures_dir):
    code, out, _ = run(capsys, "simulate", "--config", str(fixtures_dir / "spot_1000.toml"),
                       "--out", str(tmp_path / "s"), "--bucket", "600")
    assert code == 0
    line = json.loads(out)
    assert line["interruptions"] == 5 and line["wasted_fraction"] < 0.01
    summary = read_summary(tmp_path / "s" / "summary.json")
    assert summary.files_completed == 1000
    with open(tmp_path / "s" / "trace.csv") as fh:
        trace = FleetTrace.read_csv(fh)
    with open(tmp_path / "s" / "timeline.csv") as fh:
        timeline = read_timeline_csv(fh)
    assert timeline[-1][2] == 1000 and timeline[1][0] == 600.0
    # report timeline rebuilds the same file from the trace
    code, out, _ = run(capsys, "report", "timeline", "--trace", str(tmp_path / "s" / "trace.csv"), "--bucket", "600")
    assert code == 0 and out == (tmp_path / "s" / "timeline.csv").read_text()


def test_simulate_errors(capsys, tmp_path):
    code, _, err = run(capsys, "simulate", str(tmp_path / "missing.toml"))
    assert code == 2
    bad = tmp_path / "bad.toml"
    bad.write_text('seed = 1\nfleet_size = 0\n[instance]\nname="x"\nvcpus=8\ncores=8\nram_gib=64\nprice_per_hour=1\n')
    code, _, err = run(capsys, "simulate", str(bad))
    assert code == 2 and "fleet_size" in err
    bad.write_text("= broken")
    assert run(capsys, "simulate", str(bad))[0] == 2


def test_report_timeline_bad_trace(capsys, tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("a,b\n1,2\n")
    assert run(capsys, "report", "timeline", "--trace", str(p))[0] == 2


def test_analyze_scaling(capsys, tmp_path):
    code, out, _ = run(capsys, "analyze", "scaling", "--efficiency-point", "16:0.84")
    assert code == 0
    p = float(out.splitlines()[0].split("=")[1])
    assert p == pytest.approx(0.9873, abs=1e-3)
    curve = list(csv.DictReader(io.StringIO("\n".join(out.splitlines()[2:]))))
    assert len(curve) == 16 and float(curve[15]["efficiency"]) == pytest.approx(0.84, abs=1e-3)

    pts = tmp_path / "p.csv"
    pts.write_text("threads,speedup\n2,1.98\n4,3.9\n8,7.4\n16,13.4\n")
    code, out, _ = run(capsys, "analyze", "scaling", "--points", str(pts), "--fixed-price", "1.0",
                       "--per-vcpu-price", "0.01", "--out", str(tmp_path / "curve.csv"))
    assert code == 0
    fit_p = float(out.splitlines()[0].split("=")[1])
    rec = int(out.splitlines()[1].split("=")[1])
    costs = {t: (1.0 + 0.01 * t) * (0.71 / amdahl(fit_p, t) + 0.29) for t in range(1, 17)}
    assert rec == min(costs, key=costs.get)
    assert (tmp_path / "curve.csv").read_text().startswith("threads,speedup,efficiency")


def test_analyze_scaling_empty(capsys, tmp_path):
    code, _, err = run(capsys, "analyze", "scaling")
    assert code == 2 and "InsufficientData" in err
    pts = tmp_path / "p.csv"
    pts.write_text("threads,speedup\n")
    code, _, err = run(capsys, "analyze", "scaling", "--points", str(pts))
    assert code == 2 and "InsufficientData" in err
    pts.write_text("cores,x\n1,2\n")
    assert run(capsys, "analyze", "scaling", "--points", str(pts))[0] == 2
    assert run(capsys, "analyze", "scaling", "--point", "garbage")[0] == 2


def test_analyze_instances_malformed(capsys, tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("name,vcpus,cores,ram_gib,price_per_hour\nx,8,8,64,1.0\n")
    code, _, err = run(capsys, "analyze", "instances", "--pricing", str(p))
    assert code == 2 and "measured_hours" in err
    p.write_text("name,vcpus\n")
    assert run(capsys, "analyze", "instances", "--pricing", str(p))[0] == 2
    assert run(capsys, "analyze", "instances", "--pricing", str(tmp_path / "none.csv"))[0] == 2


def test_sweep_threshold_random_and_errors(capsys, tmp_path):
    code, out, _ = run(capsys, "sweep-threshold", "--random", "15", "--seed", "2", "--out", str(tmp_path / "s.csv"))
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 10 and rows[0]["terminated_count"] == "0"
    totals = [float(r["total_align_time"]) for r in rows]
    assert totals == sorted(totals, reverse=True)
    assert run(capsys, "sweep-threshold")[0] == 2
    assert run(capsys, "sweep-threshold", "--random", "3", "--thresholds", "a,b")[0] == 2
    bad = tmp_path / "t.csv"
    bad.write_text("sra_id,total_reads\nA,1\n")
    assert run(capsys, "sweep-threshold", "--trajectories", str(bad))[0] == 2


def test_console_script_and_log_env(tmp_path):
    env_run = subprocess.run([sys.executable, "-m", "alignfleet.cli", "analyze", "instances"],
                             capture_output=True, text=True,
                             env={"ALIGNFLEET_LOG": "DEBUG", "PATH": "/usr/bin:/bin"})
    assert env_run.returncode == 0 and "r7a.2xlarge" in env_run.stdout
    usage = subprocess.run([sys.executable, "-m", "alignfleet.cli"], capture_output=True, text=True)
    assert usage.returncode == 2
