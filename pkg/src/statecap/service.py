"""Privileged tracing daemon and its socket client.

The service listens on a local stream socket for newline-delimited JSON
requests and drives one external tracer subprocess per traced pid, each
writing its own log file under ``log_dir``.  Kernels (or any client) run
unprivileged; only the service needs tracing privilege.

Request:  ``{"action":"start_trace","pid":1234,"label":"nb1"}``
Success:  ``{"status":"ok","log_path":"/var/lib/statecap/trace-p1234-1669900000.log"}``
Failure:  ``{"status":"error","code":"no_such_process","message":"..."}``
"""

from __future__ import annotations

import json
import os
import re
import shutil
import signal
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass

DEFAULT_SOCKET = "/tmp/statecap.sock"
DEFAULT_LOG_DIR = "/tmp/statecap-logs"
DEFAULT_SYSCALLS = ("openat", "open", "openat2", "creat")

_LABEL_RE = re.compile(r"[^A-Za-z0-9_.-]+")


def socket_path_from_env() -> str:
    return os.environ.get("STATECAP_SOCKET", DEFAULT_SOCKET)


def tracing_enabled() -> bool:
    return os.environ.get("ENABLE_TRACE", "true").strip().lower() not in (
        "false", "0", "no", "off",
    )


class ServiceStartupError(RuntimeError):
    pass


class TraceServiceError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass
class ServiceSettings:
    syscalls: tuple[str, ...] = DEFAULT_SYSCALLS
    follow_forks: bool = True
    tracer_command: list[str] | None = None  # argv prefix; autodetected when None
    poll_interval_s: float = 0.5
    attach_timeout_s: float = 10.0
    stop_timeout_s: float = 5.0
    socket_mode: int = 0o666
    enable_trace: bool | None = None  # None: read ENABLE_TRACE at startup
    require_privilege: bool = True

    def resolved_tracer(self) -> list[str]:
        if self.tracer_command is not None:
            return list(self.tracer_command)
        if shutil.which("strace"):
            return ["strace"]
        return [sys.executable, "-u", "-m", "statecap.tracer"]


@dataclass
class TraceSession:
    target_pid: int
    tracer_pid: int
    log_path: str
    started_at: float
    status: str  # active | ended | failed
    label: str | None = None
    ended_at: float | None = None

    def to_dict(self) -> dict:
        return {
            "target_pid": self.target_pid,
            "tracer_pid": self.tracer_pid,
            "log_path": self.log_path,
            "started_at": self.started_at,
            "status": self.status,
            "label": self.label,
        }


@dataclass
class TraceSummary:
    log_path: str
    line_count: int
    duration_s: float


class _TracerChild:
    """One spawned tracer subprocess plus its stderr drain."""

    def __init__(self, proc: subprocess.Popen):
        self.proc = proc
        self.stderr_lines: list[str] = []
        self._lock = threading.Lock()
        self._drain = threading.Thread(target=self._pump, daemon=True)
        self._drain.start()

    def _pump(self) -> None:
        for line in self.proc.stderr:
            with self._lock:
                self.stderr_lines.append(line.rstrip("\n"))
        self.proc.stderr.close()

    def stderr_text(self) -> str:
        with self._lock:
            return "\n".join(self.stderr_lines)

    def saw_attach(self) -> bool:
        with self._lock:
            return any("attached" in line for line in self.stderr_lines)


def _count_lines(path: str) -> int:
    try:
        with open(path, "rb") as fh:
            return sum(1 for _ in fh)
    except OSError:
        return 0


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class TraceService:
    """Session registry plus the socket front end."""

    def __init__(self, socket_path: str, log_dir: str,
                 settings: ServiceSettings | None = None):
        self.socket_path = socket_path
        self.log_dir = log_dir
        self.settings = settings or ServiceSettings()
        if self.settings.enable_trace is None:
            self.settings.enable_trace = tracing_enabled()
        self._lock = threading.Lock()
        self._sessions: dict[int, TraceSession] = {}   # latest session per pid
        self._children: dict[int, _TracerChild] = {}   # target pid -> tracer child
        self._used_log_paths: set[str] = set()
        self._shutdown = threading.Event()
        self._sock: socket.socket | None = None
        self._reaper: threading.Thread | None = None

    # -- session operations ---------------------------------------------

    def _new_log_path(self, pid: int, label: str | None) -> str:
        epoch = int(time.time())
        suffix = f"-{_LABEL_RE.sub('', label)[:32]}" if label else ""
        candidate = os.path.join(self.log_dir, f"trace-p{pid}-{epoch}{suffix}.log")
        n = 2
        while candidate in self._used_log_paths or os.path.exists(candidate):
            candidate = os.path.join(
                self.log_dir, f"trace-p{pid}-{epoch}{suffix}.{n}.log"
            )
            n += 1
        self._used_log_paths.add(candidate)
        return candidate

    def start_trace(self, pid: int, label: str | None = None) -> TraceSession:
        if not self.settings.enable_trace:
            raise TraceServiceError("tracing_disabled", "ENABLE_TRACE is false")
        if pid <= 0:
            raise TraceServiceError("bad_request", f"pid must be positive, got {pid}")
        if not _pid_alive(pid):
            raise TraceServiceError("no_such_process", f"no such process: {pid}")
        with self._lock:
            existing = self._sessions.get(pid)
            if existing is not None and existing.status == "active":
                raise TraceServiceError(
                    "already_traced", f"pid {pid} already has an active session"
                )
            log_path = self._new_log_path(pid, label)
        argv = self.settings.resolved_tracer()
        if self.settings.follow_forks:
            argv.append("-f")
        argv += ["-ttt", "-e", "trace=" + ",".join(self.settings.syscalls),
                 "-o", log_path, "-p", str(pid)]
        proc = subprocess.Popen(
            argv, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE, text=True,
        )
        child = _TracerChild(proc)
        deadline = time.monotonic() + self.settings.attach_timeout_s
        while time.monotonic() < deadline:
            if child.saw_attach():
                break
            if proc.poll() is not None:
                stderr = child.stderr_text()
                if "No such process" in stderr:
                    raise TraceServiceError("no_such_process", stderr or f"pid {pid} vanished")
                if "not permitted" in stderr or "Operation not permitted" in stderr:
                    raise TraceServiceError("attach_permission_denied", stderr)
                raise TraceServiceError("internal", f"tracer exited early: {stderr}")
            time.sleep(0.01)
        else:
            proc.terminate()
            raise TraceServiceError("internal", "tracer did not confirm attach in time")
        session = TraceSession(
            target_pid=pid,
            tracer_pid=proc.pid,
            log_path=log_path,
            started_at=time.time(),
            status="active",
            label=label,
        )
        with self._lock:
            self._sessions[pid] = session
            self._children[pid] = child
        return session

    def stop_trace(self, pid: int) -> TraceSummary:
        with self._lock:
            session = self._sessions.get(pid)
            child = self._children.get(pid)
        if session is None:
            raise TraceServiceError("unknown_pid", f"no session for pid {pid}")
        if session.status == "active" and child is not None:
            self._terminate_child(child)
            with self._lock:
                session.status = "ended"
                session.ended_at = time.time()
        end = session.ended_at if session.ended_at is not None else time.time()
        return TraceSummary(
            log_path=session.log_path,
            line_count=_count_lines(session.log_path),
            duration_s=max(0.0, end - session.started_at),
        )

    def _terminate_child(self, child: _TracerChild) -> None:
        if child.proc.poll() is not None:
            return
        child.proc.terminate()
        try:
            child.proc.wait(timeout=self.settings.stop_timeout_s)
        except subprocess.TimeoutExpired:
            child.proc.kill()
            child.proc.wait()

    def reap_sessions(self) -> list[TraceSession]:
        """Mark sessions whose tracer exited; best effort, never raises."""
        changed = []
        with self._lock:
            active = [
                (s, self._children.get(s.target_pid))
                for s in self._sessions.values()
                if s.status == "active"
            ]
        for session, child in active:
            if child is None or child.proc.poll() is None:
                continue
            with self._lock:
                # tracer gone with the target still alive means it was killed
                session.status = "failed" if _pid_alive(session.target_pid) else "ended"
                session.ended_at = time.time()
            changed.append(session)
        return changed

    def sessions(self) -> list[TraceSession]:
        with self._lock:
            return list(self._sessions.values())

    # -- socket front end -------------------------------------------------

    def _check_privilege(self) -> None:
        if not self.settings.require_privilege:
            return
        if os.geteuid() == 0:
            return
        try:
            with open("/proc/sys/kernel/yama/ptrace_scope") as fh:
                if fh.read().strip() == "0":
                    return
        except OSError:
            pass
        raise ServiceStartupError(
            "tracing requires privilege: run the service as root, or set "
            "/proc/sys/kernel/yama/ptrace_scope to 0"
        )

    def _bind(self) -> None:
        parent = os.path.dirname(self.socket_path) or "."
        if not os.access(parent, os.W_OK):
            raise ServiceStartupError(f"socket directory not writable: {parent}")
        if os.path.exists(self.socket_path):
            probe = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
            try:
                probe.connect(self.socket_path)
            except OSError:
                os.unlink(self.socket_path)  # stale socket from a dead service
            else:
                probe.close()
                raise ServiceStartupError(
                    f"socket path already bound by a live service: {self.socket_path}"
                )
            finally:
                probe.close()
        os.makedirs(self.log_dir, exist_ok=True)
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.bind(self.socket_path)
        os.chmod(self.socket_path, self.settings.socket_mode)
        self._sock.listen(8)
        self._sock.settimeout(0.5)

    def start(self) -> None:
        """Bind the socket and start the reaper; does not serve requests yet."""
        self._check_privilege()
        self._bind()
        self._reaper = threading.Thread(target=self._reap_loop, daemon=True)
        self._reaper.start()

    def _reap_loop(self) -> None:
        while not self._shutdown.wait(self.settings.poll_interval_s):
            self.reap_sessions()

    def serve_forever(self) -> None:
        assert self._sock is not None, "call start() first"
        while not self._shutdown.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                self._handle_connection(conn)
            finally:
                conn.close()

    def _handle_connection(self, conn: socket.socket) -> None:
        conn.settimeout(10.0)
        buf = b""
        while not self._shutdown.is_set():
            nl = buf.find(b"\n")
            if nl < 0:
                try:
                    chunk = conn.recv(4096)
                except (socket.timeout, OSError):
                    return
                if not chunk:
                    return
                buf += chunk
                continue
            line, buf = buf[:nl], buf[nl + 1:]
            response = self.handle_request_line(line.decode("utf-8", "replace"))
            try:
                conn.sendall(json.dumps(response).encode() + b"\n")
            except OSError:
                return

    def handle_request_line(self, line: str) -> dict:
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
            action = request.get("action")
            if action not in ("start_trace", "stop_trace", "status"):
                raise ValueError(f"unknown action: {action!r}")
        except (json.JSONDecodeError, ValueError) as exc:
            return {"status": "error", "code": "bad_request", "message": str(exc)}
        try:
            if action == "status":
                return {
                    "status": "ok",
                    "sessions": [s.to_dict() for s in self.sessions()],
                }
            pid = request.get("pid")
            if not isinstance(pid, int) or pid <= 0:
                return {
                    "status": "error", "code": "bad_request",
                    "message": f"pid must be a positive integer, got {pid!r}",
                }
            if action == "start_trace":
                label = request.get("label")
                if label is not None and not isinstance(label, str):
                    return {
                        "status": "error", "code": "bad_request",
                        "message": "label must be a string",
                    }
                session = self.start_trace(pid, label)
                return {"status": "ok", "log_path": session.log_path}
            summary = self.stop_trace(pid)
            return {
                "status": "ok",
                "log_path": summary.log_path,
                "line_count": summary.line_count,
                "duration_s": summary.duration_s,
            }
        except TraceServiceError as exc:
            return {"status": "error", "code": exc.code, "message": exc.message}
        except Exception as exc:  # never kill the service on one request
            return {"status": "error", "code": "internal", "message": str(exc)}

    def shutdown(self) -> None:
        self._shutdown.set()
        with self._lock:
            children = list(self._children.values())
            for session in self._sessions.values():
                if session.status == "active":
                    session.status = "ended"
                    session.ended_at = time.time()
        for child in children:
            self._terminate_child(child)
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        if os.path.exists(self.socket_path):
            try:
                os.unlink(self.socket_path)
            except OSError:
                pass


def serve(socket_path: str, log_dir: str,
          settings: ServiceSettings | None = None) -> None:
    """Run the daemon until SIGTERM/SIGINT."""
    service = TraceService(socket_path, log_dir, settings)
    service.start()

    def _stop(*_args):
        service._shutdown.set()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    try:
        service.serve_forever()
    finally:
        service.shutdown()


class TraceClient:
    """Speak the newline-JSON protocol; one connection per call."""

    def __init__(self, socket_path: str | None = None, timeout: float = 30.0):
        self.socket_path = socket_path or socket_path_from_env()
        self.timeout = timeout

    def request(self, payload: dict) -> dict:
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
            sock.settimeout(self.timeout)
            sock.connect(self.socket_path)
            sock.sendall(json.dumps(payload).encode() + b"\n")
            buf = b""
            while b"\n" not in buf:
                chunk = sock.recv(4096)
                if not chunk:
                    break
                buf += chunk
        response = json.loads(buf.split(b"\n", 1)[0].decode())
        if response.get("status") != "ok":
            raise TraceServiceError(
                response.get("code", "internal"), response.get("message", "")
            )
        return response

    def start_trace(self, pid: int, label: str | None = None) -> str:
        payload = {"action": "start_trace", "pid": pid}
        if label is not None:
            payload["label"] = label
        return self.request(payload)["log_path"]

    def stop_trace(self, pid: int) -> TraceSummary:
        response = self.request({"action": "stop_trace", "pid": pid})
        return TraceSummary(
            log_path=response["log_path"],
            line_count=response["line_count"],
            duration_s=response["duration_s"],
        )

    def status(self) -> list[dict]:
        return self.request({"action": "status"})["sessions"]
