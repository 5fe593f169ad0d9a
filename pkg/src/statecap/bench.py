"""Overhead benchmark harness: trace on/off, CPU time vs wall time.

Three workloads at desk scale: a single sequential file write, parallel
file writes across workers (the mixed case: CPU for buffer generation,
memory, disk), and pure counter loops pinned one per worker.  Each
workload runs as a child process tree so the tracer attaches to exactly
the measured work.
"""

from __future__ import annotations

import csv
import enum
import json
import os
import re
import shutil
import statistics
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field

from .service import TraceClient

DESK_IO_SIZES = (1 << 20, 16 << 20, 64 << 20, 256 << 20)
DESK_CPU_COUNTER = 10**7
DESK_REPS = 5

# the kernel accounts CPU time in scheduler ticks; a reading can overshoot
# the true value (and so the wall clock) by up to one tick
CPU_TICK_S = 0.01

CSV_COLUMNS = (
    "workload", "size", "workers", "trace",
    "cpu_time_s", "wall_time_s", "cpu_ratio", "wall_ratio", "seed", "reps",
)


class BenchError(RuntimeError):
    pass


class Workload(enum.Enum):
    IO_SINGLE = "io-single"
    IO_PARALLEL = "io-parallel"
    CPU_PARALLEL = "cpu-parallel"


def default_workers() -> int:
    return min(os.cpu_count() or 1, 16)


_SIZE_RE = re.compile(r"^(\d+)\s*(B|KiB|MiB|GiB)?$", re.IGNORECASE)
_SIZE_UNITS = {"b": 1, "kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30}


def parse_size(text: str) -> int:
    m = _SIZE_RE.match(text.strip())
    if not m:
        raise ValueError(f"cannot parse size {text!r} (use e.g. 64MiB)")
    unit = (m.group(2) or "B").lower()
    return int(m.group(1)) * _SIZE_UNITS[unit]


@dataclass(frozen=True)
class BenchConfig:
    workload: Workload
    size: int  # bytes per file (io) or counter limit (cpu)
    workers: int
    repetitions: int
    trace: bool
    scratch_dir: str
    seed: int = 42

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise BenchError("size must be positive")
        if self.workers < 1:
            raise BenchError("workers must be >= 1")
        if self.repetitions < 1:
            raise BenchError("repetitions must be >= 1")
        if self.workload is Workload.IO_SINGLE and self.workers != 1:
            raise BenchError("io-single runs with exactly one worker")


@dataclass
class BenchResult:
    config: BenchConfig
    cpu_time_s: float  # median over samples
    wall_time_s: float
    samples: list[tuple[float, float]]  # per-repetition (cpu, wall)
    work: int  # bytes written or iterations


@dataclass
class OverheadReport:
    workload: Workload
    cpu_ratio: float
    wall_ratio: float
    traced: BenchResult
    untraced: BenchResult


def run_workload(config: BenchConfig, tracer: TraceClient | None = None) -> BenchResult:
    """Run the configured workload ``repetitions`` times and take medians.

    With ``trace=True`` each repetition's child is registered with the
    trace service before its work starts and unregistered afterwards.
    """
    if config.trace and tracer is None:
        raise BenchError("traced run requested but no tracer handle given")
    os.makedirs(config.scratch_dir, exist_ok=True)
    if not os.access(config.scratch_dir, os.W_OK):
        raise BenchError(f"scratch dir not writable: {config.scratch_dir}")
    samples: list[tuple[float, float]] = []
    work_values: list[int] = []
    try:
        for _ in range(config.repetitions):
            result = _run_once(config, tracer)
            samples.append((result["cpu_time_s"], result["wall_time_s"]))
            work_values.append(result.get("bytes_written", result.get("iterations", 0)))
    finally:
        _clean_scratch(config.scratch_dir)
    if len(set(work_values)) != 1:
        raise BenchError(f"work accomplished varied across repetitions: {work_values}")
    return BenchResult(
        config=config,
        cpu_time_s=statistics.median(c for c, _ in samples),
        wall_time_s=statistics.median(w for _, w in samples),
        samples=samples,
        work=work_values[0],
    )


def _run_once(config: BenchConfig, tracer: TraceClient | None) -> dict:
    argv = [
        sys.executable, "-u", "-m", "statecap.workloads",
        "--workload", config.workload.value,
        "--size", str(config.size),
        "--workers", str(config.workers),
        "--seed", str(config.seed),
        "--scratch", config.scratch_dir,
        "--wait-go",
    ]
    env = dict(os.environ)
    # keep the byte generator single threaded so per-sample CPU time is
    # bounded by workers * wall time
    env.update({"OPENBLAS_NUM_THREADS": "1", "OMP_NUM_THREADS": "1",
                "MKL_NUM_THREADS": "1"})
    child = subprocess.Popen(
        argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, env=env,
    )
    registered = False
    try:
        ready = child.stdout.readline()
        if ready.strip() != "ready":
            raise BenchError(f"workload child failed to start: {ready!r}")
        if config.trace:
            tracer.start_trace(child.pid, label=f"bench-{config.workload.value}")
            registered = True
        child.stdin.write("go\n")
        child.stdin.flush()
        result_line = child.stdout.readline()
        returncode = child.wait(timeout=600)
        if returncode != 0:
            raise BenchError(f"workload child exited with {returncode}")
        try:
            return json.loads(result_line)
        except json.JSONDecodeError as exc:
            raise BenchError(f"bad workload result {result_line!r}: {exc}") from exc
    finally:
        if child.poll() is None:
            child.kill()
            child.wait()
        if registered:
            try:
                tracer.stop_trace(child.pid)
            except Exception:
                pass  # session may already be reaped after child exit


def _clean_scratch(scratch_dir: str) -> None:
    for name in os.listdir(scratch_dir):
        if name.startswith("statecap-io-"):
            try:
                os.unlink(os.path.join(scratch_dir, name))
            except OSError:
                pass


def compare(traced: BenchResult, untraced: BenchResult) -> OverheadReport:
    """Ratio of traced to untraced medians for one workload config."""
    for attr in ("workload", "size", "workers"):
        a, b = getattr(traced.config, attr), getattr(untraced.config, attr)
        if a != b:
            raise BenchError(f"config mismatch on {attr}: {a} vs {b}")
    if not traced.config.trace or untraced.config.trace:
        raise BenchError("compare wants one traced and one untraced result")
    return OverheadReport(
        workload=traced.config.workload,
        cpu_ratio=traced.cpu_time_s / untraced.cpu_time_s,
        wall_ratio=traced.wall_time_s / untraced.wall_time_s,
        traced=traced,
        untraced=untraced,
    )


@dataclass
class SuiteSummary:
    rows: list[dict] = field(default_factory=list)
    csv_path: str | None = None
    figure_paths: list[str] = field(default_factory=list)


def run_suite(
    sizes: list[int],
    workloads: list[Workload],
    repetitions: int,
    out_csv: str,
    tracer: TraceClient,
    workers: int | None = None,
    cpu_counter: int = DESK_CPU_COUNTER,
    scratch_dir: str | None = None,
    seed: int = 42,
    figure_dir: str | None = None,
) -> SuiteSummary:
    """One row per (workload, size, trace) with medians and on/off ratios.

    Row order is deterministic: workloads as given, sizes ascending,
    untraced before traced.
    """
    if not sizes:
        raise BenchError("no sizes given")
    workers = workers if workers is not None else default_workers()
    scratch = scratch_dir or tempfile.mkdtemp(prefix="statecap-bench-")
    own_scratch = scratch_dir is None
    summary = SuiteSummary()
    try:
        for workload in workloads:
            if workload is Workload.CPU_PARALLEL:
                workload_sizes = [cpu_counter]
            else:
                workload_sizes = sorted(sizes)
            for size in workload_sizes:
                wl_workers = 1 if workload is Workload.IO_SINGLE else workers
                results = {}
                for trace in (False, True):
                    config = BenchConfig(
                        workload=workload, size=size, workers=wl_workers,
                        repetitions=repetitions, trace=trace,
                        scratch_dir=scratch, seed=seed,
                    )
                    results[trace] = run_workload(config, tracer if trace else None)
                if results[True].work != results[False].work:
                    raise BenchError(
                        f"{workload.value}@{size}: traced and untraced runs "
                        f"accomplished different work"
                    )
                report = compare(results[True], results[False])
                for trace in (False, True):
                    res = results[trace]
                    summary.rows.append({
                        "workload": workload.value,
                        "size": size,
                        "workers": wl_workers,
                        "trace": "on" if trace else "off",
                        "cpu_time_s": round(res.cpu_time_s, 6),
                        "wall_time_s": round(res.wall_time_s, 6),
                        "cpu_ratio": round(report.cpu_ratio, 6),
                        "wall_ratio": round(report.wall_ratio, 6),
                        "seed": seed,
                        "reps": repetitions,
                    })
    finally:
        if own_scratch:
            shutil.rmtree(scratch, ignore_errors=True)
    write_csv(summary.rows, out_csv)
    summary.csv_path = out_csv
    if figure_dir is not None:
        from .figures import render_suite_figures

        summary.figure_paths = render_suite_figures(summary.rows, figure_dir)
    return summary


def write_csv(rows: list[dict], out_csv: str) -> None:
    parent = os.path.dirname(out_csv)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(out_csv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
