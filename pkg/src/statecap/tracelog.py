"""Parse tracer log files into structured open-syscall events.

The log format is the classic tracer text format produced with a pid
column and fractional epoch timestamps (`-f -ttt`), e.g.::

    1234  1669900000.123456 openat(AT_FDCWD, "/tmp/a.txt", O_WRONLY|O_CREAT|O_TRUNC, 0666) = 3
    1234  1669900000.234567 +++ exited with 0 +++

When several processes are traced at once a syscall may be split into an
``<unfinished ...>`` line and a later ``<... name resumed>`` line;
:func:`stitch` joins those back into single events.
"""

from __future__ import annotations

import enum
import posixpath
import re
from dataclasses import dataclass
from typing import Iterable, Iterator

OPEN_FAMILY = ("open", "openat", "openat2", "creat")


class LineKind(enum.Enum):
    COMPLETE = "complete"
    UNFINISHED = "unfinished"
    RESUMED = "resumed"
    EXIT = "exit"
    SIGNAL = "signal"
    OTHER = "other"


@dataclass(frozen=True)
class Dirfd:
    """The directory-fd argument of an openat-family call.

    ``fd is None and path is None`` means AT_FDCWD.  A decoded path (the
    tracer's ``3</some/dir>`` decoration) wins over the raw fd number.
    """

    fd: int | None = None
    path: str | None = None

    @property
    def is_cwd(self) -> bool:
        return self.fd is None and self.path is None

    def __repr__(self) -> str:
        if self.is_cwd:
            return "Dirfd(CWD)"
        if self.path is not None:
            return f"Dirfd(path={self.path!r})"
        return f"Dirfd(fd={self.fd})"


DIRFD_CWD = Dirfd()


@dataclass(frozen=True)
class SyscallEvent:
    """One parsed open-family invocation."""

    pid: int
    timestamp_s: float
    syscall: str
    dirfd: Dirfd
    path: str
    flags: frozenset[str]
    result_fd: int | None
    errno_name: str | None
    path_truncated: bool = False

    @property
    def ok(self) -> bool:
        return self.result_fd is not None


@dataclass(frozen=True)
class RawTraceLine:
    """One classified log line.

    ``payload`` is the line body after the pid and timestamp columns.
    Complete lines carry the parsed event; unfinished/resumed lines carry
    the fragments :func:`stitch` needs to join them.
    """

    kind: LineKind
    pid: int
    payload: str
    timestamp_s: float | None = None
    event: SyscallEvent | None = None
    stitch_prefix: str | None = None
    stitch_suffix: str | None = None
    syscall: str | None = None


@dataclass(frozen=True)
class ResolvedAccess:
    """A syscall event with its recorded path made absolute (or not)."""

    event: SyscallEvent
    absolute_path: str | None
    unresolved_reason: str | None = None

    @property
    def resolved(self) -> bool:
        return self.absolute_path is not None


@dataclass
class ParseDiagnostics:
    """Tally of lines stitch had to drop."""

    orphaned_resumed: int = 0
    unfinished_at_eof: int = 0
    unjoinable: int = 0

    def total(self) -> int:
        return self.orphaned_resumed + self.unfinished_at_eof + self.unjoinable


_LEAD_RE = re.compile(r"^(?:(?P<pid>\d+)\s+)?(?:(?P<ts>\d+\.\d+)\s+)?(?P<body>.*)$")
_EXIT_RE = re.compile(
    r"^\+\+\+ (?:exited with \d+|killed by SIG\w+(?: \(core dumped\))?) \+\+\+$"
)
_SIGNAL_RE = re.compile(r"^--- (?:SIG\w+|stopped by SIG\w+).*---\s*$")
_RESUMED_RE = re.compile(r"^<\.\.\.\s+(?P<name>\w+)\s+resumed>\s*(?P<rest>.*)$")
_UNFINISHED_RE = re.compile(r"^(?P<name>\w+)\((?P<args>.*?)\s*<unfinished \.\.\.>$")
_SYSCALL_RE = re.compile(
    r"^(?P<name>\w+)\((?P<args>.*)\)\s+=\s+(?P<ret>-?\d+|\?)"
    r"(?:<[^>]*>)?(?:\s+(?P<rest>.*))?$"
)

_QUOTED = r'"(?P<path>(?:[^"\\]|\\.)*)"(?P<trunc>\.\.\.)?'
_DIRFD = (
    r"(?:AT_FDCWD(?:<(?P<cwd_decor>[^>]*)>)?|(?P<dfd>\d+)(?:<(?P<dfd_decor>[^>]*)>)?)"
)
_AT_ARGS_RE = re.compile(rf"^{_DIRFD}\s*,\s*{_QUOTED}\s*,\s*(?P<tail>.*)$")
_PLAIN_ARGS_RE = re.compile(rf"^{_QUOTED}\s*(?:,\s*(?P<tail>.*))?$")
_FLAGS_RE = re.compile(r"^(?P<flags>[A-Za-z0-9_|]+)(?:\s*,\s*[0-7x0-9]+)?$")
_HOW_RE = re.compile(r"^\{flags=(?P<flags>[A-Za-z0-9_|]+)[^}]*\}\s*,\s*\d+$")

_ESCAPE_RE = re.compile(r"\\([0-7]{1,3}|x[0-9a-fA-F]{2}|.)")
_ESCAPE_MAP = {"n": "\n", "t": "\t", "r": "\r", "f": "\f", "v": "\v", "a": "\a", "b": "\b"}


def _unquote(s: str) -> str:
    def sub(m: re.Match) -> str:
        tok = m.group(1)
        if tok[0] in "01234567":
            return chr(int(tok, 8))
        if tok[0] == "x":
            return chr(int(tok[1:], 16))
        return _ESCAPE_MAP.get(tok, tok)

    return _ESCAPE_RE.sub(sub, s)


def _parse_flags(text: str) -> frozenset[str]:
    names = set()
    for tok in text.split("|"):
        tok = tok.strip()
        if not tok or tok.startswith(("0", "1", "2", "3", "4", "5", "6", "7", "8", "9")):
            continue
        names.add(tok[2:] if tok.startswith("O_") else tok)
    # normalize to exactly one access mode (O_RDONLY is 0 and may be implicit)
    if "RDWR" in names:
        names -= {"RDONLY", "WRONLY"}
    elif "WRONLY" in names:
        names.discard("RDONLY")
    else:
        names.add("RDONLY")
    return frozenset(names)


def _parse_result(ret: str, rest: str | None) -> tuple[int | None, str | None]:
    if ret == "?":
        return None, "UNKNOWN"
    value = int(ret)
    if value >= 0:
        return value, None
    errno_name = "UNKNOWN"
    if rest:
        first = rest.split(None, 1)[0]
        if re.fullmatch(r"E[A-Z0-9]+", first):
            errno_name = first
    return None, errno_name


def _parse_open_args(
    name: str, args: str
) -> tuple[Dirfd, str, bool, frozenset[str]] | None:
    """Split the argument text of one open-family call.

    Returns (dirfd, path, truncated, flags) or None when the text does not
    fit the call's known shape.
    """
    if name in ("openat", "openat2"):
        m = _AT_ARGS_RE.match(args)
        if not m:
            return None
        if m.group("cwd_decor") is not None:
            dirfd = Dirfd(path=m.group("cwd_decor"))
        elif m.group("dfd") is not None:
            decor = m.group("dfd_decor")
            dirfd = Dirfd(fd=int(m.group("dfd")), path=decor)
        else:
            dirfd = DIRFD_CWD
        tail = m.group("tail")
        fm = (_HOW_RE if name == "openat2" else _FLAGS_RE).match(tail)
        if not fm:
            return None
        flags = _parse_flags(fm.group("flags"))
    else:  # open, creat
        m = _PLAIN_ARGS_RE.match(args)
        if not m:
            return None
        dirfd = DIRFD_CWD
        if name == "creat":
            flags = frozenset({"WRONLY", "CREAT", "TRUNC"})
        else:
            tail = m.group("tail") or ""
            fm = _FLAGS_RE.match(tail)
            if not fm:
                return None
            flags = _parse_flags(fm.group("flags"))
    path = _unquote(m.group("path"))
    truncated = m.group("trunc") is not None
    return dirfd, path, truncated, flags


def parse_line(line: str) -> RawTraceLine:
    """Classify one log line.  Total: anything unrecognized is Other."""
    lead = _LEAD_RE.match(line)
    assert lead is not None  # the pattern accepts any string
    pid = int(lead.group("pid")) if lead.group("pid") else 0
    ts = float(lead.group("ts")) if lead.group("ts") else None
    body = lead.group("body")

    if _EXIT_RE.match(body):
        return RawTraceLine(LineKind.EXIT, pid, body, ts)
    if _SIGNAL_RE.match(body):
        return RawTraceLine(LineKind.SIGNAL, pid, body, ts)

    m = _RESUMED_RE.match(body)
    if m:
        if m.group("name") not in OPEN_FAMILY:
            return RawTraceLine(LineKind.OTHER, pid, body, ts)
        return RawTraceLine(
            LineKind.RESUMED, pid, body, ts,
            stitch_suffix=m.group("rest"), syscall=m.group("name"),
        )

    m = _UNFINISHED_RE.match(body)
    if m:
        if m.group("name") not in OPEN_FAMILY:
            return RawTraceLine(LineKind.OTHER, pid, body, ts)
        prefix = f"{m.group('name')}({m.group('args')}"
        return RawTraceLine(
            LineKind.UNFINISHED, pid, body, ts,
            stitch_prefix=prefix, syscall=m.group("name"),
        )

    m = _SYSCALL_RE.match(body)
    if m and m.group("name") in OPEN_FAMILY:
        parsed = _parse_open_args(m.group("name"), m.group("args"))
        if parsed is not None:
            dirfd, path, truncated, flags = parsed
            result_fd, errno_name = _parse_result(m.group("ret"), m.group("rest"))
            event = SyscallEvent(
                pid=pid,
                timestamp_s=ts if ts is not None else 0.0,
                syscall=m.group("name"),
                dirfd=dirfd,
                path=path,
                flags=flags,
                result_fd=result_fd,
                errno_name=errno_name,
                path_truncated=truncated,
            )
            return RawTraceLine(LineKind.COMPLETE, pid, body, ts, event=event)

    return RawTraceLine(LineKind.OTHER, pid, body, ts)


def stitch(
    lines: Iterable[RawTraceLine],
    diagnostics: ParseDiagnostics | None = None,
) -> Iterator[SyscallEvent]:
    """Join unfinished/resumed pairs and emit events in file order.

    Complete lines pass through.  Exit/Signal/Other lines are dropped.
    Orphaned resumed lines and unfinished lines that never resume are
    dropped and tallied in ``diagnostics``.
    """
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    pending: dict[int, RawTraceLine] = {}

    for line in lines:
        if line.kind is LineKind.COMPLETE:
            yield line.event
        elif line.kind is LineKind.UNFINISHED:
            if line.pid in pending:
                diag.unjoinable += 1  # a second unfinished replaces a dangling one
            pending[line.pid] = line
        elif line.kind is LineKind.RESUMED:
            head = pending.pop(line.pid, None)
            if head is None or head.syscall != line.syscall:
                if head is not None:
                    pending[line.pid] = head
                diag.orphaned_resumed += 1
                continue
            joined = f"{head.stitch_prefix}{line.stitch_suffix}"
            lead = f"{line.pid} " if line.pid else ""
            ts = head.timestamp_s if head.timestamp_s is not None else line.timestamp_s
            ts_text = f"{ts:.6f} " if ts is not None else ""
            reparsed = parse_line(f"{lead}{ts_text}{joined}")
            if reparsed.kind is LineKind.COMPLETE:
                yield reparsed.event
            elif reparsed.kind is LineKind.UNFINISHED:
                # resumed into another interruption; keep waiting
                pending[line.pid] = reparsed
            else:
                diag.unjoinable += 1

    diag.unfinished_at_eof += len(pending)


def resolve_path(event: SyscallEvent, trace_cwd: str) -> ResolvedAccess:
    """Make the event's recorded path absolute against the traced cwd.

    ``trace_cwd`` is the target's working directory captured at trace
    start and treated as constant for the whole log.
    """
    if not trace_cwd.startswith("/"):
        raise ValueError(f"trace_cwd must be absolute, got {trace_cwd!r}")
    if event.path_truncated:
        return ResolvedAccess(event, None, "truncated")
    if event.path.startswith("/"):
        return ResolvedAccess(event, _normalize(event.path))
    if event.dirfd.path is not None:
        return ResolvedAccess(event, _normalize(posixpath.join(event.dirfd.path, event.path)))
    if event.dirfd.is_cwd:
        return ResolvedAccess(event, _normalize(posixpath.join(trace_cwd, event.path)))
    return ResolvedAccess(event, None, "dirfd-not-decoded")


def _normalize(path: str) -> str:
    norm = posixpath.normpath(path)
    if norm.startswith("//") and not norm.startswith("///"):
        norm = norm[1:]  # posix double-slash root is preserved by normpath
    return norm


def parse_log(
    log_path: str,
    trace_cwd: str,
    diagnostics: ParseDiagnostics | None = None,
) -> list[ResolvedAccess]:
    """Parse a whole log file: parse_line, stitch, resolve, in file order."""
    with open(log_path, "r", encoding="utf-8", errors="replace") as fh:
        raw = [parse_line(line.rstrip("\n")) for line in fh]
    return [resolve_path(ev, trace_cwd) for ev in stitch(raw, diagnostics)]
