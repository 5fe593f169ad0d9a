"""Bench harness: workload accounting, timing sanity, suite structure.

Sizes here are small; the full desk-scale run lives in the acceptance
suite.  Traced cases need root, like the rest of the tracing stack.
"""

import csv
import os
import threading

import pytest

from statecap.bench import (
    BenchConfig,
    BenchError,
    CPU_TICK_S,
    CSV_COLUMNS,
    Workload,
    compare,
    parse_size,
    run_suite,
    run_workload,
    write_csv,
)
from statecap.service import ServiceSettings, TraceClient, TraceService

needs_root = pytest.mark.skipif(os.geteuid() != 0, reason="tracing needs root")


@pytest.fixture
def tracer(tmp_path):
    svc = TraceService(str(tmp_path / "bench.sock"), str(tmp_path / "logs"),
                       ServiceSettings(poll_interval_s=0.1))
    svc.start()
    threading.Thread(target=svc.serve_forever, daemon=True).start()
    yield TraceClient(svc.socket_path)
    svc.shutdown()


class TestParseSize:
    @pytest.mark.parametrize("text,expected", [
        ("1MiB", 1 << 20), ("16mib", 16 << 20), ("64KiB", 64 << 10),
        ("1GiB", 1 << 30), ("12345", 12345), ("7 B", 7),
    ])
    def test_ok(self, text, expected):
        assert parse_size(text) == expected

    def test_garbage(self):
        with pytest.raises(ValueError):
            parse_size("five furlongs")


class TestConfig:
    def test_io_single_needs_one_worker(self, tmp_path):
        with pytest.raises(BenchError):
            BenchConfig(Workload.IO_SINGLE, 1024, 2, 1, False, str(tmp_path))

    def test_positive_size(self, tmp_path):
        with pytest.raises(BenchError):
            BenchConfig(Workload.IO_SINGLE, 0, 1, 1, False, str(tmp_path))


class TestRunWorkload:
    def test_io_single_accounting(self, tmp_path):
        config = BenchConfig(Workload.IO_SINGLE, 1 << 20, 1, 2, False,
                             str(tmp_path / "scratch"))
        result = run_workload(config)
        assert result.work == 1 << 20
        assert len(result.samples) == 2
        assert result.wall_time_s > 0

    def test_wall_at_least_cpu_single_worker(self, tmp_path):
        config = BenchConfig(Workload.IO_SINGLE, 1 << 20, 1, 3, False,
                             str(tmp_path / "scratch"))
        result = run_workload(config)
        for cpu, wall in result.samples:
            assert wall >= cpu

    def test_cpu_parallel_bound(self, tmp_path):
        workers = 2
        config = BenchConfig(Workload.CPU_PARALLEL, 10**6, workers, 2, False,
                             str(tmp_path / "scratch"))
        result = run_workload(config)
        assert result.work == workers * 10**6
        for cpu, wall in result.samples:
            assert cpu <= workers * wall * 1.1

    def test_scratch_cleaned(self, tmp_path):
        scratch = tmp_path / "scratch"
        config = BenchConfig(Workload.IO_PARALLEL, 1 << 18, 2, 2, False,
                             str(scratch))
        run_workload(config)
        assert list(scratch.iterdir()) == []

    def test_traced_needs_tracer(self, tmp_path):
        config = BenchConfig(Workload.IO_SINGLE, 1024, 1, 1, True,
                             str(tmp_path / "scratch"))
        with pytest.raises(BenchError, match="tracer"):
            run_workload(config, None)

    @needs_root
    def test_traced_run_logs_scratch_file(self, tmp_path, tracer):
        scratch = tmp_path / "scratch"
        config = BenchConfig(Workload.IO_SINGLE, 1 << 20, 1, 1, True,
                             str(scratch))
        result = run_workload(config, tracer)
        assert result.work == 1 << 20
        logs = list((tmp_path / "logs").iterdir())
        assert logs
        assert any("statecap-io-" in log.read_text() for log in logs)

    @needs_root
    def test_work_identical_traced_untraced(self, tmp_path, tracer):
        scratch = str(tmp_path / "scratch")
        kwargs = dict(workload=Workload.IO_PARALLEL, size=1 << 18, workers=2,
                      repetitions=2, scratch_dir=scratch, seed=7)
        untraced = run_workload(BenchConfig(trace=False, **kwargs))
        traced = run_workload(BenchConfig(trace=True, **kwargs), tracer)
        assert untraced.work == traced.work


class TestCompare:
    def _result(self, tmp_path, trace):
        return run_workload(
            BenchConfig(Workload.CPU_PARALLEL, 10**5, 2, 1, False,
                        str(tmp_path / "scratch")),
        )

    def test_identity(self, tmp_path):
        result = self._result(tmp_path, False)
        from dataclasses import replace

        traced = type(result)(
            config=replace(result.config, trace=True),
            cpu_time_s=result.cpu_time_s, wall_time_s=result.wall_time_s,
            samples=result.samples, work=result.work,
        )
        report = compare(traced, result)
        assert report.cpu_ratio == pytest.approx(1.0)
        assert report.wall_ratio == pytest.approx(1.0)

    def test_mismatched_workloads_rejected(self, tmp_path):
        a = run_workload(BenchConfig(Workload.CPU_PARALLEL, 10**5, 2, 1, False,
                                     str(tmp_path / "s1")))
        b = run_workload(BenchConfig(Workload.IO_SINGLE, 1 << 16, 1, 1, False,
                                     str(tmp_path / "s2")))
        with pytest.raises(BenchError, match="mismatch"):
            compare(a, b)


class TestSuite:
    @needs_root
    def test_row_cardinality_and_order(self, tmp_path, tracer):
        out = tmp_path / "suite.csv"
        summary = run_suite(
            sizes=[1 << 16, 1 << 18],
            workloads=[Workload.IO_SINGLE, Workload.IO_PARALLEL],
            repetitions=1,
            out_csv=str(out),
            tracer=tracer,
            workers=2,
            figure_dir=None,
        )
        # 2 workloads x 2 sizes x {off,on}
        assert len(summary.rows) == 8
        with open(out) as fh:
            rows = list(csv.DictReader(fh))
        assert [r["trace"] for r in rows] == ["off", "on"] * 4
        assert [r["workload"] for r in rows[:4]] == ["io-single"] * 4
        sizes = [int(r["size"]) for r in rows[:4]]
        assert sizes == sorted(sizes)

    @needs_root
    def test_figures_rendered(self, tmp_path, tracer):
        out = tmp_path / "suite.csv"
        summary = run_suite(
            sizes=[1 << 16],
            workloads=[Workload.IO_SINGLE, Workload.CPU_PARALLEL],
            repetitions=1,
            out_csv=str(out),
            tracer=tracer,
            workers=2,
            cpu_counter=10**5,
            figure_dir=str(tmp_path / "figs"),
        )
        assert sorted(os.path.basename(p) for p in summary.figure_paths) == [
            "cpu-parallel.png", "io-single.png",
        ]
        for path in summary.figure_paths:
            assert os.path.getsize(path) > 1000


def test_write_csv_columns(tmp_path):
    out = tmp_path / "cols.csv"
    write_csv([], str(out))
    header = out.read_text().strip()
    assert header == ",".join(CSV_COLUMNS)
