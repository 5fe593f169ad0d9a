"""Command line entry point: serve, trace, parse, package, restore, verify, bench.

Exit codes: 0 success, 1 domain error, 2 usage error.  Domain errors print
one line to stderr: ``error: <code>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import shlex
import subprocess
import sys
import tempfile
import threading

from . import archive as archive_mod
from . import bench as bench_mod
from .filters import FilterConfigError, ShortlistStats, load_rules, shortlist
from .service import (
    DEFAULT_LOG_DIR,
    ServiceSettings,
    ServiceStartupError,
    TraceClient,
    TraceService,
    TraceServiceError,
    serve,
    socket_path_from_env,
    tracing_enabled,
)
from .tracelog import ParseDiagnostics, parse_log


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _fail(code: str, message: str) -> "CliError":
    return CliError(code, message)


# -- subcommand implementations ------------------------------------------


def cmd_serve(args: argparse.Namespace) -> int:
    settings = ServiceSettings(poll_interval_s=args.poll_interval)
    try:
        serve(args.socket, args.log_dir, settings)
    except ServiceStartupError as exc:
        raise _fail("startup", str(exc))
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    if args.trace_action in ("start", "stop") and not tracing_enabled():
        print("warning: ENABLE_TRACE is false; trace commands are no-ops",
              file=sys.stderr)
        return 0
    client = TraceClient(args.socket)
    try:
        if args.trace_action == "start":
            log_path = client.start_trace(args.pid, args.label)
            print(log_path)
        elif args.trace_action == "stop":
            summary = client.stop_trace(args.pid)
            print(json.dumps({
                "log_path": summary.log_path,
                "line_count": summary.line_count,
                "duration_s": summary.duration_s,
            }))
        else:
            print(json.dumps(client.status(), indent=2))
    except TraceServiceError as exc:
        raise _fail(exc.code, exc.message)
    except OSError as exc:
        raise _fail("io", f"cannot reach trace service at {client.socket_path}: {exc}")
    return 0


def _accesses_to_json(accesses) -> list[dict]:
    out = []
    for acc in accesses:
        ev = acc.event
        out.append({
            "pid": ev.pid,
            "timestamp_s": ev.timestamp_s,
            "syscall": ev.syscall,
            "path": ev.path,
            "flags": sorted(ev.flags),
            "result_fd": ev.result_fd,
            "errno": ev.errno_name,
            "absolute_path": acc.absolute_path,
            "unresolved_reason": acc.unresolved_reason,
        })
    return out


def cmd_parse(args: argparse.Namespace) -> int:
    try:
        diagnostics = ParseDiagnostics()
        accesses = parse_log(args.log, args.cwd, diagnostics)
    except OSError as exc:
        raise _fail("io", str(exc))
    payload = json.dumps(_accesses_to_json(accesses), indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    else:
        print(payload)
    if diagnostics.total():
        print(f"warning: {diagnostics.total()} lines dropped while stitching",
              file=sys.stderr)
    return 0


def capture_pipeline(
    log_path: str,
    cwd: str,
    filter_config: str | None,
    libs_json: str | None,
    session_bin: str | None,
    notebook: str | None,
    out_zip: str,
    reads_only: bool = False,
) -> archive_mod.ArchiveManifest:
    """parse -> shortlist -> package in one call; raises CliError with the stage name."""
    try:
        config = load_rules(filter_config)
    except (FilterConfigError, OSError) as exc:
        raise _fail("filter", str(exc))
    try:
        accesses = parse_log(log_path, cwd)
    except OSError as exc:
        raise _fail("parse", str(exc))
    # the notebook ships separately and the trace log is tooling output
    self_paths = {os.path.abspath(p) for p in (notebook, log_path) if p}
    accesses = [
        a for a in accesses
        if a.absolute_path is None or a.absolute_path not in self_paths
    ]
    deps = shortlist(accesses, config, ShortlistStats())
    if reads_only:
        deps = [d for d in deps if d.mode.value == "read"]
    libs: list[archive_mod.LibraryDependency] = []
    if libs_json:
        try:
            with open(libs_json, "r", encoding="utf-8") as fh:
                mapping = json.load(fh)
            if not isinstance(mapping, dict):
                raise ValueError("libraries JSON must be an object")
        except (OSError, ValueError) as exc:
            raise _fail("libraries", str(exc))
        libs = [
            archive_mod.LibraryDependency(name, str(ver))
            for name, ver in sorted(mapping.items())
        ]
    blob = None
    if session_bin:
        try:
            with open(session_bin, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise _fail("session", str(exc))
    try:
        return archive_mod.package(deps, libs, blob, notebook, out_zip)
    except archive_mod.ArchiveError as exc:
        raise _fail("package", str(exc))


def cmd_package(args: argparse.Namespace) -> int:
    manifest = capture_pipeline(
        log_path=args.log,
        cwd=args.cwd,
        filter_config=args.filter_config,
        libs_json=args.libs,
        session_bin=args.session,
        notebook=args.notebook,
        out_zip=args.out,
        reads_only=args.reads_only,
    )
    print(json.dumps({
        "archive": args.out,
        "file_count": manifest.file_count,
        "library_count": manifest.library_count,
        "has_session": manifest.has_session,
    }))
    return 0


def cmd_restore(args: argparse.Namespace) -> int:
    try:
        report = archive_mod.restore_files(args.archive, args.dest_root, args.overwrite)
        requirements = args.requirements
        if requirements is None and args.install_cmd:
            requirements = os.path.join(
                tempfile.gettempdir(), f"statecap-reqs-{os.getpid()}.txt"
            )
        count = 0
        if requirements:
            count = archive_mod.emit_requirements(args.archive, requirements)
            report.requirements_path = requirements
    except archive_mod.ArchiveError as exc:
        raise _fail("archive", str(exc))
    except OSError as exc:
        raise _fail("io", str(exc))
    if args.install_cmd and report.requirements_path and count:
        command = args.install_cmd.format(requirements=report.requirements_path)
        proc = subprocess.run(shlex.split(command))
        if proc.returncode != 0:
            raise _fail("install", f"installer exited with {proc.returncode}")
    print(json.dumps({
        "placed": report.placed,
        "skipped": [list(item) for item in report.skipped],
        "requirements": report.requirements_path,
    }, indent=2))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    try:
        report = archive_mod.verify(args.archive)
    except archive_mod.ArchiveError as exc:
        raise _fail("archive", str(exc))
    for entry in report.entries:
        print(f"{'ok' if entry.ok else 'FAIL'}  {entry.uuid}  {entry.original_path}"
              + ("" if entry.ok else f"  ({entry.detail})"))
    for problem in report.problems:
        print(f"FAIL  {problem}")
    if not report.ok:
        raise _fail("verify", "archive verification failed")
    print(f"verified {len(report.entries)} entries, manifest consistent")
    return 0


def _connect_or_spawn_service(args) -> tuple[TraceClient, TraceService | None]:
    """Use the service at --socket if live, else run a private one in-process."""
    client = TraceClient(args.socket)
    try:
        client.status()
        return client, None
    except (OSError, TraceServiceError):
        pass
    private_dir = tempfile.mkdtemp(prefix="statecap-bench-svc-")
    service = TraceService(
        os.path.join(private_dir, "svc.sock"),
        os.path.join(private_dir, "logs"),
    )
    service.start()
    threading.Thread(target=service.serve_forever, daemon=True).start()
    return TraceClient(service.socket_path), service


def cmd_bench(args: argparse.Namespace) -> int:
    trace_requested = args.suite or args.trace == "on"
    if trace_requested and not tracing_enabled():
        print("warning: ENABLE_TRACE is false; running untraced only",
              file=sys.stderr)
        if not args.suite:
            args.trace = "off"
            trace_requested = False
        else:
            raise _fail("bench", "suite needs tracing; ENABLE_TRACE is false")
    try:
        sizes = [bench_mod.parse_size(s) for s in args.size.split(",")]
    except ValueError as exc:
        raise _fail("bench", str(exc))
    workers = args.workers or bench_mod.default_workers()
    service = None
    client = None
    try:
        if trace_requested:
            client, service = _connect_or_spawn_service(args)
        if args.suite:
            workloads = [
                bench_mod.Workload.IO_SINGLE,
                bench_mod.Workload.IO_PARALLEL,
                bench_mod.Workload.CPU_PARALLEL,
            ]
            figure_dir = None
            if not args.no_figures:
                figure_dir = args.figdir or (os.path.dirname(args.out) or ".")
            summary = bench_mod.run_suite(
                sizes=sizes,
                workloads=workloads,
                repetitions=args.reps,
                out_csv=args.out,
                tracer=client,
                workers=workers,
                cpu_counter=args.cpu_counter,
                scratch_dir=args.scratch,
                seed=args.seed,
                figure_dir=figure_dir,
            )
            print(f"wrote {len(summary.rows)} rows to {summary.csv_path}")
            for path in summary.figure_paths:
                print(f"wrote figure {path}")
        else:
            workload = bench_mod.Workload(args.workload)
            wl_workers = 1 if workload is bench_mod.Workload.IO_SINGLE else workers
            config = bench_mod.BenchConfig(
                workload=workload,
                size=sizes[0],
                workers=wl_workers,
                repetitions=args.reps,
                trace=args.trace == "on",
                scratch_dir=args.scratch or tempfile.mkdtemp(prefix="statecap-bench-"),
                seed=args.seed,
            )
            result = bench_mod.run_workload(config, client)
            row = {
                "workload": workload.value,
                "size": config.size,
                "workers": config.workers,
                "trace": args.trace,
                "cpu_time_s": round(result.cpu_time_s, 6),
                "wall_time_s": round(result.wall_time_s, 6),
                "cpu_ratio": "",
                "wall_ratio": "",
                "seed": config.seed,
                "reps": config.repetitions,
            }
            if args.out:
                bench_mod.write_csv([row], args.out)
            print(",".join(str(row[c]) for c in bench_mod.CSV_COLUMNS))
    except bench_mod.BenchError as exc:
        raise _fail("bench", str(exc))
    except TraceServiceError as exc:
        raise _fail(exc.code, exc.message)
    finally:
        if service is not None:
            service.shutdown()
    return 0


# -- argument wiring -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="statecap",
        description="capture, archive, and restore the file/library/session "
                    "state of a running computation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the tracing service")
    p.add_argument("--socket", default=socket_path_from_env())
    p.add_argument("--log-dir", default=DEFAULT_LOG_DIR)
    p.add_argument("--poll-interval", type=float, default=0.5)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("trace", help="control tracing of a pid")
    trace_sub = p.add_subparsers(dest="trace_action", required=True)
    for action in ("start", "stop", "status"):
        tp = trace_sub.add_parser(action)
        tp.add_argument("--socket", default=socket_path_from_env())
        if action != "status":
            tp.add_argument("--pid", type=int, required=True)
        if action == "start":
            tp.add_argument("--label", default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("parse", help="parse a trace log to JSON accesses")
    p.add_argument("log")
    p.add_argument("--cwd", required=True, help="working directory of the traced process")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("package", help="trace log -> filtered deps -> archive")
    p.add_argument("log")
    p.add_argument("--cwd", required=True)
    p.add_argument("--filter-config", default=None)
    p.add_argument("--libs", default=None, help="libraries JSON (name -> version)")
    p.add_argument("--session", default=None, help="serialized session blob file")
    p.add_argument("--notebook", default=None)
    p.add_argument("--reads-only", action="store_true",
                   help="ship only files the workload read")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_package)

    p = sub.add_parser("restore", help="place archived files back (restore steps 1-3)")
    p.add_argument("archive")
    p.add_argument("--dest-root", default=None)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--requirements", default=None,
                   help="also emit name==version pins to this file")
    p.add_argument("--install-cmd", default=None,
                   help="installer template, e.g. 'pip install -r {requirements}'")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("verify", help="checksum archive entries")
    p.add_argument("archive")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="tracing overhead benchmarks")
    p.add_argument("--workload", choices=[w.value for w in bench_mod.Workload],
                   default=bench_mod.Workload.IO_SINGLE.value)
    p.add_argument("--size", default="1MiB",
                   help="one size, or comma list with --suite (e.g. 1MiB,16MiB)")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--reps", type=int, default=bench_mod.DESK_REPS)
    p.add_argument("--trace", choices=["on", "off"], default="off")
    p.add_argument("--suite", action="store_true",
                   help="run the full desk-scale suite (all workloads, on and off)")
    p.add_argument("--cpu-counter", type=int, default=bench_mod.DESK_CPU_COUNTER)
    p.add_argument("--scratch", default=None)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default="bench.csv")
    p.add_argument("--figdir", default=None)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--socket", default=socket_path_from_env())
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
