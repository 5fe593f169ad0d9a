"""Trace service integration: sessions, protocol, reaping, shutdown."""

import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from statecap.service import (
    ServiceSettings,
    ServiceStartupError,
    TraceClient,
    TraceService,
    TraceServiceError,
)

pytestmark = pytest.mark.skipif(
    os.geteuid() != 0, reason="service integration needs tracing privilege"
)


def spawn_gated_child(tmp_path, name="gated.txt", extra=""):
    """Child that opens a file only after a byte arrives on stdin."""
    code = (
        "import sys\n"
        "sys.stdout.write('up\\n'); sys.stdout.flush()\n"
        "sys.stdin.readline()\n"
        f"open({str(tmp_path / name)!r}, 'w').write('d')\n"
        + extra
    )
    child = subprocess.Popen([sys.executable, "-S", "-c", code],
                             stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                             text=True)
    assert child.stdout.readline().strip() == "up"
    return child


@pytest.fixture
def service(tmp_path):
    svc = TraceService(str(tmp_path / "svc.sock"), str(tmp_path / "logs"),
                       ServiceSettings(poll_interval_s=0.1))
    svc.start()
    import threading

    threading.Thread(target=svc.serve_forever, daemon=True).start()
    yield svc
    svc.shutdown()


@pytest.fixture
def client(service):
    return TraceClient(service.socket_path)


class TestStartStop:
    def test_trace_gated_child(self, tmp_path, client):
        child = spawn_gated_child(tmp_path)
        log_path = client.start_trace(child.pid, label="t1")
        assert log_path.startswith(str(tmp_path / "logs"))
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)
        summary = client.stop_trace(child.pid)
        assert summary.log_path == log_path
        assert summary.line_count >= 1
        assert str(tmp_path / "gated.txt") in open(log_path).read()

    def test_no_such_process(self, client):
        with pytest.raises(TraceServiceError) as err:
            client.start_trace(999999999)
        assert err.value.code == "no_such_process"

    def test_already_traced(self, tmp_path, client):
        child = spawn_gated_child(tmp_path, "one.txt")
        client.start_trace(child.pid)
        with pytest.raises(TraceServiceError) as err:
            client.start_trace(child.pid)
        assert err.value.code == "already_traced"
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)
        client.stop_trace(child.pid)

    def test_stop_unknown_pid(self, client):
        with pytest.raises(TraceServiceError) as err:
            client.stop_trace(424242)
        assert err.value.code == "unknown_pid"

    def test_stop_idempotent(self, tmp_path, client):
        child = spawn_gated_child(tmp_path, "idem.txt")
        client.start_trace(child.pid)
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)
        first = client.stop_trace(child.pid)
        second = client.stop_trace(child.pid)
        assert first.log_path == second.log_path
        assert first.line_count == second.line_count

    def test_stop_after_target_exited(self, tmp_path, client, service):
        child = spawn_gated_child(tmp_path, "fast.txt")
        client.start_trace(child.pid)
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if all(s.status != "active" for s in service.sessions()):
                break
            time.sleep(0.05)
        summary = client.stop_trace(child.pid)
        assert summary.line_count >= 1

    def test_short_lived_target(self, tmp_path, client, service):
        child = subprocess.Popen([sys.executable, "-S", "-c", "pass"])
        try:
            log_path = client.start_trace(child.pid)
        except TraceServiceError as err:
            # target can exit before attach; that is the no-such-process path
            assert err.code == "no_such_process"
            return
        child.wait(timeout=30)
        summary = client.stop_trace(child.pid)
        assert os.path.exists(log_path)
        assert summary.line_count >= 0


class TestConcurrentSessions:
    def test_two_sessions_distinct_logs(self, tmp_path, client):
        a = spawn_gated_child(tmp_path, "alpha.txt")
        b = spawn_gated_child(tmp_path, "beta.txt")
        log_a = client.start_trace(a.pid, label="a")
        log_b = client.start_trace(b.pid, label="b")
        assert log_a != log_b
        for child in (a, b):
            child.stdin.write("go\n")
            child.stdin.flush()
        a.wait(timeout=30)
        b.wait(timeout=30)
        client.stop_trace(a.pid)
        client.stop_trace(b.pid)
        content_a = open(log_a).read()
        content_b = open(log_b).read()
        assert "alpha.txt" in content_a and "alpha.txt" not in content_b
        assert "beta.txt" in content_b and "beta.txt" not in content_a

    def test_log_path_injective_across_sessions(self, tmp_path, client, service):
        paths = []
        for i in range(3):
            child = spawn_gated_child(tmp_path, f"inj{i}.txt")
            paths.append(client.start_trace(child.pid))
            child.stdin.write("go\n")
            child.stdin.flush()
            child.wait(timeout=30)
            client.stop_trace(child.pid)
        assert len(set(paths)) == 3


class TestReaping:
    def test_target_exit_marks_ended(self, tmp_path, client, service):
        child = spawn_gated_child(tmp_path, "reap.txt")
        client.start_trace(child.pid)
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            sessions = service.sessions()
            if sessions and sessions[0].status == "ended":
                break
            time.sleep(0.05)
        assert service.sessions()[0].status == "ended"

    def test_killed_tracer_marks_failed(self, tmp_path, client, service):
        child = spawn_gated_child(tmp_path, "ktrc.txt")
        client.start_trace(child.pid)
        tracer_pid = service.sessions()[0].tracer_pid
        os.kill(tracer_pid, signal.SIGKILL)
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if service.sessions()[0].status == "failed":
                break
            time.sleep(0.05)
        assert service.sessions()[0].status == "failed"
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)

    def test_reap_empty(self, service):
        assert service.reap_sessions() == []


class TestProtocol:
    def _raw(self, service, payload: bytes) -> dict:
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
            sock.connect(service.socket_path)
            sock.sendall(payload)
            data = b""
            while b"\n" not in data:
                data += sock.recv(4096)
        return json.loads(data.split(b"\n")[0])

    def test_malformed_then_usable(self, service):
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as sock:
            sock.connect(service.socket_path)
            sock.sendall(b"this is not json\n")
            reader = sock.makefile()
            assert json.loads(reader.readline())["code"] == "bad_request"
            sock.sendall(json.dumps({"action": "status"}).encode() + b"\n")
            assert json.loads(reader.readline())["status"] == "ok"

    def test_unknown_action(self, service):
        response = self._raw(service, b'{"action": "explode"}\n')
        assert response["code"] == "bad_request"

    def test_bad_pid_type(self, service):
        response = self._raw(service, b'{"action": "start_trace", "pid": "nope"}\n')
        assert response["code"] == "bad_request"

    def test_status_lists_sessions(self, tmp_path, client):
        child = spawn_gated_child(tmp_path, "status.txt")
        client.start_trace(child.pid)
        sessions = client.status()
        assert any(s["target_pid"] == child.pid for s in sessions)
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)
        client.stop_trace(child.pid)


class TestStartup:
    def test_socket_already_bound(self, tmp_path, service):
        other = TraceService(service.socket_path, str(tmp_path / "logs2"))
        with pytest.raises(ServiceStartupError, match="already bound"):
            other.start()

    def test_stale_socket_recovered(self, tmp_path):
        stale = tmp_path / "stale.sock"
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        sock.bind(str(stale))
        sock.close()  # file left behind, nobody listening
        svc = TraceService(str(stale), str(tmp_path / "logs3"))
        svc.start()
        import threading

        threading.Thread(target=svc.serve_forever, daemon=True).start()
        try:
            TraceClient(str(stale)).status()
        finally:
            svc.shutdown()

    def test_tracing_disabled(self, tmp_path):
        svc = TraceService(str(tmp_path / "dis.sock"), str(tmp_path / "logs4"),
                           ServiceSettings(enable_trace=False))
        svc.start()
        try:
            with pytest.raises(TraceServiceError) as err:
                svc.start_trace(os.getpid())
            assert err.value.code == "tracing_disabled"
        finally:
            svc.shutdown()

    def test_shutdown_terminates_tracers(self, tmp_path):
        svc = TraceService(str(tmp_path / "sd.sock"), str(tmp_path / "logs5"),
                           ServiceSettings(poll_interval_s=0.1))
        svc.start()
        import threading

        threading.Thread(target=svc.serve_forever, daemon=True).start()
        child = spawn_gated_child(tmp_path, "sdown.txt")
        TraceClient(svc.socket_path).start_trace(child.pid)
        tracer_pid = svc.sessions()[0].tracer_pid
        svc.shutdown()
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            try:
                os.kill(tracer_pid, 0)
            except ProcessLookupError:
                break
            time.sleep(0.05)
        else:
            pytest.fail("tracer child still alive after shutdown")
        assert not os.path.exists(svc.socket_path)
        child.stdin.write("go\n")
        child.stdin.flush()
        child.wait(timeout=30)
