"""Syscall tracer for the open family, built directly on ptrace(2).

Drop-in backend for hosts without the system tracer binary: accepts the
same argument shape (``-f -ttt -e trace=... -o LOG -p PID``) and writes
the same text log format, so the parsing pipeline cannot tell the two
apart.  x86-64 only.  Needs the same privilege the system tracer needs
(root or a permissive ptrace scope).

Usage::

    python -m statecap.tracer -f -ttt -e trace=openat,open,openat2,creat \
        -o /tmp/trace.log -p 1234
    python -m statecap.tracer -f -ttt -o /tmp/trace.log -- cat /etc/hostname
"""

from __future__ import annotations

import argparse
import ctypes
import errno as errno_mod
import os
import signal
import struct
import sys
import time

_libc = ctypes.CDLL("libc.so.6", use_errno=True)

PTRACE_TRACEME = 0
PTRACE_CONT = 7
PTRACE_GETREGS = 12
PTRACE_ATTACH = 16
PTRACE_DETACH = 17
PTRACE_SYSCALL = 24
PTRACE_SETOPTIONS = 0x4200
PTRACE_GETEVENTMSG = 0x4201

OPT_SYSGOOD = 0x01
OPT_FORK = 0x02
OPT_VFORK = 0x04
OPT_CLONE = 0x08
OPT_EXEC = 0x10
TRACE_OPTIONS = OPT_SYSGOOD | OPT_FORK | OPT_VFORK | OPT_CLONE | OPT_EXEC

EVENT_FORK, EVENT_VFORK, EVENT_CLONE, EVENT_EXEC = 1, 2, 3, 4

WALL = 0x40000000
SYSCALL_TRAP = signal.SIGTRAP | 0x80
ENOSYS = 38
AT_FDCWD = -100

# x86-64 syscall numbers for the open family
SYSCALL_NAMES = {2: "open", 85: "creat", 257: "openat", 437: "openat2"}

# open(2) flag bits and their rendered names, x86-64 values
_FLAG_BITS = [
    (0o100, "O_CREAT"),
    (0o200, "O_EXCL"),
    (0o400, "O_NOCTTY"),
    (0o1000, "O_TRUNC"),
    (0o2000, "O_APPEND"),
    (0o4000, "O_NONBLOCK"),
    (0o10000, "O_DSYNC"),
    (0o20000, "O_ASYNC"),
    (0o40000, "O_DIRECT"),
    (0o100000, "O_LARGEFILE"),
    (0o200000, "O_DIRECTORY"),
    (0o400000, "O_NOFOLLOW"),
    (0o1000000, "O_NOATIME"),
    (0o2000000, "O_CLOEXEC"),
    (0o4000000, "__O_SYNC"),
    (0o10000000, "O_PATH"),
    (0o20000000, "__O_TMPFILE"),
]
O_ACCMODE = 0o3


class _Regs(ctypes.Structure):
    _fields_ = [(name, ctypes.c_ulonglong) for name in (
        "r15", "r14", "r13", "r12", "rbp", "rbx", "r11", "r10", "r9", "r8",
        "rax", "rcx", "rdx", "rsi", "rdi", "orig_rax", "rip", "cs", "eflags",
        "rsp", "ss", "fs_base", "gs_base", "ds", "es", "fs", "gs")]


class PtraceError(OSError):
    pass


class _StopRequested(Exception):
    """Raised from the signal handler so a blocked waitpid aborts."""


def _ptrace(request: int, pid: int, addr: int = 0, data: int = 0) -> int:
    ctypes.set_errno(0)
    result = _libc.ptrace(request, pid, ctypes.c_void_p(addr), ctypes.c_void_p(data))
    if result == -1:
        err = ctypes.get_errno()
        if err:
            raise PtraceError(err, f"ptrace({request}, {pid}): {os.strerror(err)}")
    return result


def render_flags(flags: int) -> str:
    acc = flags & O_ACCMODE
    parts = [{0: "O_RDONLY", 1: "O_WRONLY", 2: "O_RDWR"}.get(acc, f"{acc:#o}")]
    rest = flags & ~O_ACCMODE
    for bit, name in _FLAG_BITS:
        if rest & bit:
            parts.append(name)
            rest &= ~bit
    # the kernel spells O_SYNC as __O_SYNC|O_DSYNC and O_TMPFILE includes O_DIRECTORY
    if "__O_SYNC" in parts and "O_DSYNC" in parts:
        parts.remove("__O_SYNC")
        parts[parts.index("O_DSYNC")] = "O_SYNC"
    if "__O_TMPFILE" in parts and "O_DIRECTORY" in parts:
        parts.remove("__O_TMPFILE")
        parts[parts.index("O_DIRECTORY")] = "O_TMPFILE"
    if rest:
        parts.append(f"{rest:#o}")
    return "|".join(parts)


def escape_path(raw: bytes) -> str:
    out = []
    for byte in raw:
        ch = chr(byte)
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif 0x20 <= byte < 0x7F:
            out.append(ch)
        else:
            out.append(f"\\{byte:o}")
    return "".join(out)


class _Task:
    __slots__ = ("tid", "pending")

    def __init__(self, tid: int):
        self.tid = tid
        self.pending = None  # (syscall_name, entry_ts, rendered_args) while inside an open


class LogWriter:
    """Serializes per-task line fragments the way the system tracer does.

    At most one task's line can be "open" at a time; when another task
    needs to log first, the open line is flushed with the unfinished
    marker and later completed by a resumed line.
    """

    def __init__(self, fh, timestamps: bool = True):
        self._fh = fh
        self._timestamps = timestamps
        self._incomplete: tuple[int, float, str, str] | None = None  # tid, ts, name, text
        self._suspended: dict[int, str] = {}  # tid -> syscall name awaiting resume

    def _lead(self, tid: int, ts: float) -> str:
        if self._timestamps:
            return f"{tid}  {ts:.6f} "
        return f"{tid}  "

    def _flush_incomplete(self) -> None:
        if self._incomplete is None:
            return
        tid, ts, name, text = self._incomplete
        self._fh.write(f"{self._lead(tid, ts)}{text} <unfinished ...>\n")
        self._suspended[tid] = name
        self._incomplete = None

    def entry(self, tid: int, ts: float, name: str, args_text: str) -> None:
        self._flush_incomplete()
        self._incomplete = (tid, ts, name, f"{name}({args_text}")

    def exit(self, tid: int, ts: float, name: str, ret_text: str) -> None:
        if self._incomplete is not None and self._incomplete[0] == tid:
            itid, its, _, text = self._incomplete
            self._incomplete = None
            self._fh.write(f"{self._lead(itid, its)}{text}) = {ret_text}\n")
        elif tid in self._suspended:
            del self._suspended[tid]
            self._fh.write(f"{self._lead(tid, ts)}<... {name} resumed>) = {ret_text}\n")
        self._fh.flush()

    def plain(self, tid: int, ts: float, body: str) -> None:
        self._flush_incomplete()
        self._suspended.pop(tid, None)
        self._fh.write(f"{self._lead(tid, ts)}{body}\n")
        self._fh.flush()

    def task_gone(self, tid: int, ts: float, body: str) -> None:
        if self._incomplete is not None and self._incomplete[0] == tid:
            self._flush_incomplete()
        self.plain(tid, ts, body)


class Tracer:
    def __init__(self, log_fh, syscalls: set[str], follow: bool = True,
                 timestamps: bool = True):
        self.writer = LogWriter(log_fh, timestamps)
        self.trace_nrs = {nr for nr, name in SYSCALL_NAMES.items() if name in syscalls}
        self.follow = follow
        self.tasks: dict[int, _Task] = {}
        self._stop = False

    # -- attachment ----------------------------------------------------

    def attach_tree(self, pid: int) -> int:
        """Attach to every task (thread) of ``pid``; returns the task count."""
        try:
            tids = sorted(int(t) for t in os.listdir(f"/proc/{pid}/task"))
        except FileNotFoundError:
            raise PtraceError(errno_mod.ESRCH, f"no such process: {pid}")
        attached = 0
        for tid in tids:
            try:
                _ptrace(PTRACE_ATTACH, tid)
            except PtraceError as exc:
                if exc.errno == errno_mod.ESRCH and attached:
                    continue  # thread raced away; keep the rest
                raise
            self._await_stop(tid)
            _ptrace(PTRACE_SETOPTIONS, tid, 0, self._options())
            self.tasks[tid] = _Task(tid)
            _ptrace(PTRACE_SYSCALL, tid, 0, 0)
            attached += 1
        if not attached:
            raise PtraceError(errno_mod.ESRCH, f"no such process: {pid}")
        return attached

    def adopt_spawned(self, pid: int) -> None:
        """Take over a child that called TRACEME and is stopped at exec."""
        self._await_stop(pid)
        _ptrace(PTRACE_SETOPTIONS, pid, 0, self._options())
        self.tasks[pid] = _Task(pid)
        _ptrace(PTRACE_SYSCALL, pid, 0, 0)

    def _options(self) -> int:
        opts = OPT_SYSGOOD | OPT_EXEC
        if self.follow:
            opts |= OPT_FORK | OPT_VFORK | OPT_CLONE
        return opts

    @staticmethod
    def _await_stop(tid: int) -> None:
        while True:
            wpid, status = os.waitpid(tid, WALL)
            if os.WIFSTOPPED(status):
                return
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                raise PtraceError(errno_mod.ESRCH, f"task {tid} exited before trace")

    def request_stop(self, *_args) -> None:
        # waitpid retries on EINTR (PEP 475); raising is the only way out
        self._stop = True
        raise _StopRequested()

    # -- main loop -----------------------------------------------------

    def run(self) -> None:
        """Trace until every task exits or a stop is requested.

        On stop/exit the kernel releases all tracees automatically; the
        log is flushed line by line as it is written.
        """
        while self.tasks and not self._stop:
            try:
                tid, status = os.waitpid(-1, WALL)
            except (InterruptedError, _StopRequested):
                continue
            except ChildProcessError:
                break
            now = time.time()
            if os.WIFEXITED(status):
                self._task_exit(tid, now, f"+++ exited with {os.WEXITSTATUS(status)} +++")
                continue
            if os.WIFSIGNALED(status):
                name = signal.Signals(os.WTERMSIG(status)).name
                self._task_exit(tid, now, f"+++ killed by {name} +++")
                continue
            if not os.WIFSTOPPED(status):
                continue
            self._handle_stop(tid, status, now)

    def _task_exit(self, tid: int, now: float, body: str) -> None:
        task = self.tasks.pop(tid, None)
        if task is None:
            return
        self.writer.task_gone(tid, now, body)

    def _handle_stop(self, tid: int, status: int, now: float) -> None:
        sig = os.WSTOPSIG(status)
        event = status >> 16
        task = self.tasks.get(tid)
        if task is None:
            # first stop of an auto-attached child (options are inherited)
            task = _Task(tid)
            self.tasks[tid] = task
            self._resume(tid, 0)
            return
        if event:
            # fork/clone/exec notifications; the new task announces itself
            self._resume(tid, 0)
            return
        if sig == SYSCALL_TRAP:
            self._handle_syscall(task, now)
            self._resume(tid, 0)
            return
        if sig in (signal.SIGSTOP, signal.SIGTRAP):
            self._resume(tid, 0)
            return
        try:
            name = signal.Signals(sig).name
        except ValueError:
            name = f"SIGRT{sig}"
        self.writer.plain(tid, now, f"--- {name} {{si_signo={name}}} ---")
        self._resume(tid, sig)

    def _resume(self, tid: int, sig: int) -> None:
        try:
            _ptrace(PTRACE_SYSCALL, tid, 0, sig)
        except PtraceError:
            self.tasks.pop(tid, None)  # died between stop and resume

    def _handle_syscall(self, task: _Task, now: float) -> None:
        regs = _Regs()
        try:
            _ptrace(PTRACE_GETREGS, task.tid, 0, ctypes.addressof(regs))
        except PtraceError:
            return
        rax = ctypes.c_longlong(regs.rax).value
        if task.pending is None:
            if rax == -ENOSYS and regs.orig_rax in self.trace_nrs:
                name = SYSCALL_NAMES[regs.orig_rax]
                args_text = self._render_args(task.tid, name, regs)
                task.pending = name
                self.writer.entry(task.tid, now, name, args_text)
        else:
            name = task.pending
            task.pending = None
            self.writer.exit(task.tid, now, name, self._render_ret(rax))

    # -- argument rendering ---------------------------------------------

    def _read_cstring(self, tid: int, addr: int) -> bytes | None:
        if addr == 0:
            return None
        try:
            with open(f"/proc/{tid}/mem", "rb", buffering=0) as mem:
                mem.seek(addr)
                chunks = []
                total = 0
                while total < 4096:
                    chunk = mem.read(256)
                    if not chunk:
                        break
                    nul = chunk.find(b"\0")
                    if nul >= 0:
                        chunks.append(chunk[:nul])
                        return b"".join(chunks)
                    chunks.append(chunk)
                    total += len(chunk)
                return b"".join(chunks) or None
        except OSError:
            return None

    def _read_how(self, tid: int, addr: int) -> tuple[int, int, int] | None:
        try:
            with open(f"/proc/{tid}/mem", "rb", buffering=0) as mem:
                mem.seek(addr)
                raw = mem.read(24)
        except OSError:
            return None
        if len(raw) != 24:
            return None
        return struct.unpack("<QQQ", raw)

    @staticmethod
    def _render_dirfd(value: int) -> str:
        signed = ctypes.c_int(value & 0xFFFFFFFF).value  # dirfd is a 32-bit int arg
        return "AT_FDCWD" if signed == AT_FDCWD else str(signed)

    def _render_path(self, tid: int, addr: int) -> str:
        raw = self._read_cstring(tid, addr)
        if raw is None:
            return f"{addr:#x}"
        return f'"{escape_path(raw)}"'

    def _render_args(self, tid: int, name: str, regs: _Regs) -> str:
        if name == "openat":
            path = self._render_path(tid, regs.rsi)
            flags = int(regs.rdx)
            text = f"{self._render_dirfd(regs.rdi)}, {path}, {render_flags(flags)}"
            if flags & (0o100 | 0o20000000):  # O_CREAT|O_TMPFILE take a mode
                text += f", 0{int(regs.r10) & 0o7777:o}"
            return text
        if name == "open":
            path = self._render_path(tid, regs.rdi)
            flags = int(regs.rsi)
            text = f"{path}, {render_flags(flags)}"
            if flags & (0o100 | 0o20000000):
                text += f", 0{int(regs.rdx) & 0o7777:o}"
            return text
        if name == "creat":
            path = self._render_path(tid, regs.rdi)
            return f"{path}, 0{int(regs.rsi) & 0o7777:o}"
        # openat2
        path = self._render_path(tid, regs.rsi)
        how = self._read_how(tid, regs.rdx)
        if how is None:
            how_text = f"{regs.rdx:#x}"
        else:
            flags, mode, resolve = how
            how_text = f"{{flags={render_flags(flags)}, mode=0{mode:o}, resolve={resolve:#x}}}"
        return f"{self._render_dirfd(regs.rdi)}, {path}, {how_text}, {int(regs.r10)}"

    @staticmethod
    def _render_ret(rax: int) -> str:
        if rax >= 0:
            return str(rax)
        code = -rax
        name = errno_mod.errorcode.get(code, f"E{code}")
        return f"-1 {name} ({os.strerror(code)})"


def _traceme() -> None:
    _libc.ptrace(PTRACE_TRACEME, 0, None, None)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="statecap-tracer",
        description="trace open-family syscalls of a process tree to a log file",
    )
    parser.add_argument("-f", dest="follow", action="store_true",
                        help="follow forks and clones")
    parser.add_argument("-ttt", dest="timestamps", action="store_true",
                        help="prefix each line with a fractional epoch timestamp")
    parser.add_argument("-e", dest="expr", default="trace=openat,open,openat2,creat",
                        help="trace expression, e.g. trace=openat,open")
    parser.add_argument("-o", dest="output", required=True, help="log file path")
    parser.add_argument("-p", dest="pid", type=int, help="attach to this pid")
    parser.add_argument("command", nargs="*", help="command to spawn and trace")
    args = parser.parse_args(argv)

    if not args.expr.startswith("trace="):
        parser.error("only -e trace=<names> expressions are supported")
    syscalls = {s.strip() for s in args.expr[len("trace="):].split(",") if s.strip()}
    unknown = syscalls - set(SYSCALL_NAMES.values())
    if unknown:
        parser.error(f"unsupported syscalls: {sorted(unknown)}")
    if bool(args.pid) == bool(args.command):
        parser.error("exactly one of -p PID or a command is required")

    try:
        log_fh = open(args.output, "w", encoding="utf-8")
    except OSError as exc:
        print(f"statecap-tracer: cannot open log: {exc}", file=sys.stderr)
        return 1

    tracer = Tracer(log_fh, syscalls, follow=args.follow, timestamps=args.timestamps)
    signal.signal(signal.SIGTERM, tracer.request_stop)
    signal.signal(signal.SIGINT, tracer.request_stop)

    import subprocess  # spawn mode only

    child = None
    try:
        if args.pid:
            count = tracer.attach_tree(args.pid)
            print(f"statecap-tracer: attached to {args.pid} ({count} tasks)",
                  file=sys.stderr, flush=True)
        else:
            child = subprocess.Popen(args.command, preexec_fn=_traceme)
            tracer.adopt_spawned(child.pid)
            print(f"statecap-tracer: attached to {child.pid} (1 tasks)",
                  file=sys.stderr, flush=True)
        try:
            tracer.run()
        except _StopRequested:
            pass
    except PtraceError as exc:
        if exc.errno == errno_mod.EPERM:
            print("statecap-tracer: attach failed: Operation not permitted "
                  "(need root or ptrace_scope=0)", file=sys.stderr)
        elif exc.errno == errno_mod.ESRCH:
            print(f"statecap-tracer: {exc.strerror or exc}: No such process",
                  file=sys.stderr)
        else:
            print(f"statecap-tracer: {exc}", file=sys.stderr)
        log_fh.close()
        return 1
    finally:
        if child is not None and child.poll() is None:
            child.kill()
            child.wait()
    log_fh.flush()
    log_fh.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
