"""Workload child process for the overhead benchmarks.

Runs as its own process so a tracer can attach to exactly the workload
tree.  Protocol on stdio: print ``ready``, wait for one line on stdin
(the harness registers the pid with the tracer in between), do the work,
print one JSON result line.

CPU time is the process tree's: every pool worker reports its own
CPU-time clock (ns resolution, covering the worker's whole life up to
task return) and the parent adds its own clock delta around the work
region.  Rusage of reaped children would be tick-quantized, which is
coarser than the effect being measured.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
import time


def _write_one(task: tuple[int, int, int, str]) -> tuple[int, float]:
    index, size, seed, scratch = task
    import numpy as np

    buf = np.random.default_rng(seed).bytes(size)
    path = os.path.join(scratch, f"statecap-io-{index}-{os.getpid()}.dat")
    try:
        with open(path, "wb") as output:
            output.write(buf)
    finally:
        try:
            os.unlink(path)
        except OSError:
            pass
    return size, time.process_time()


def _count(limit: int) -> tuple[int, float]:
    counter = 1
    while True:
        counter = counter + 1
        if counter > limit:
            break
    return limit, time.process_time()


def run_io_single(size: int, seed: int, scratch: str) -> tuple[dict, float]:
    written, _ = _write_one((0, size, seed, scratch))
    return {"bytes_written": written}, 0.0


def run_io_parallel(size: int, workers: int, seed: int, scratch: str) -> tuple[dict, float]:
    tasks = [(i, size, seed + i, scratch) for i in range(workers)]
    with multiprocessing.Pool(workers) as pool:
        results = pool.map(_write_one, tasks)
    return {"bytes_written": sum(n for n, _ in results)}, sum(c for _, c in results)


def run_cpu_parallel(limit: int, workers: int) -> tuple[dict, float]:
    with multiprocessing.Pool(workers) as pool:
        results = pool.map(_count, [limit] * workers)
    return {"iterations": sum(n for n, _ in results)}, sum(c for _, c in results)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="statecap-workload")
    parser.add_argument("--workload", required=True,
                        choices=["io-single", "io-parallel", "cpu-parallel"])
    parser.add_argument("--size", type=int, required=True,
                        help="bytes per file (io) or counter limit (cpu)")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--scratch", default="/tmp")
    parser.add_argument("--wait-go", action="store_true",
                        help="print ready and wait for stdin before working")
    args = parser.parse_args(argv)

    if args.workload.startswith("io"):
        # import before the handshake: the measured region covers buffer
        # generation and the write, not interpreter warmup
        import numpy  # noqa: F401

    if args.wait_go:
        print("ready", flush=True)
        sys.stdin.readline()

    own_before = time.process_time()
    wall_before = time.monotonic()
    if args.workload == "io-single":
        work, workers_cpu = run_io_single(args.size, args.seed, args.scratch)
    elif args.workload == "io-parallel":
        work, workers_cpu = run_io_parallel(args.size, args.workers, args.seed,
                                            args.scratch)
    else:
        work, workers_cpu = run_cpu_parallel(args.size, args.workers)
    wall = time.monotonic() - wall_before
    cpu = (time.process_time() - own_before) + workers_cpu

    result = {"cpu_time_s": cpu, "wall_time_s": wall}
    result.update(work)
    print(json.dumps(result), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
