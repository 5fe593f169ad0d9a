"""Rule-based shortlisting of the files a computation genuinely used.

Resolved accesses from the trace log are mostly runtime noise: interpreter
startup, bytecode caches, installer scratch.  An ordered rule list decides
per path whether it is a real data dependency; first match wins and the
default (no rule matched) is to include.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field

from .tracelog import ResolvedAccess


class Matcher(enum.Enum):
    PATH_PREFIX = "path_prefix"
    GLOB = "glob"
    SUBSTRING = "substring"


class Action(enum.Enum):
    EXCLUDE = "exclude"
    INCLUDE = "include"


class AccessMode(enum.Enum):
    READ = "read"
    WRITTEN = "written"
    READ_WRITE = "read_write"


class FilterConfigError(ValueError):
    """Malformed filter-rule configuration."""


@dataclass(frozen=True)
class FilterRule:
    order: int
    matcher: Matcher
    pattern: str
    action: Action
    reason: str

    def __post_init__(self) -> None:
        if not self.pattern:
            raise FilterConfigError("rule pattern must be nonempty")
        if self.action is Action.EXCLUDE and not self.reason:
            raise FilterConfigError("exclude rules need a reason label")
        object.__setattr__(self, "_regex", _compile(self.matcher, self.pattern))

    def matches(self, path: str) -> bool:
        return self._regex.search(path) is not None


def _compile(matcher: Matcher, pattern: str) -> re.Pattern:
    if matcher is Matcher.PATH_PREFIX:
        return re.compile("^" + re.escape(pattern))
    if matcher is Matcher.SUBSTRING:
        return re.compile(re.escape(pattern))
    return re.compile(_glob_to_regex(pattern))


def _glob_to_regex(pattern: str) -> str:
    """Translate a glob to an anchored regex; ``**`` crosses ``/``, ``*`` does not."""
    out = ["^"]
    i = 0
    while i < len(pattern):
        c = pattern[i]
        if c == "*":
            if pattern[i : i + 2] == "**":
                out.append(".*")
                i += 2
                continue
            out.append("[^/]*")
        elif c == "?":
            out.append("[^/]")
        else:
            out.append(re.escape(c))
        i += 1
    out.append("$")
    return "".join(out)


@dataclass(frozen=True)
class Decision:
    include: bool
    reason: str | None = None


@dataclass(frozen=True)
class FilterConfig:
    rules: tuple[FilterRule, ...]
    default_action: Action = Action.INCLUDE

    def __post_init__(self) -> None:
        orders = [r.order for r in self.rules]
        if any(a >= b for a, b in zip(orders, orders[1:])):
            raise FilterConfigError("rule orders must be strictly increasing")


@dataclass(frozen=True)
class FileDependency:
    absolute_path: str
    mode: AccessMode
    first_seen: int
    event_count: int


@dataclass
class ShortlistStats:
    """Where every input access went: kept, dropped, or excluded-by-reason."""

    included: int = 0
    unresolved: int = 0
    failed_open: int = 0
    directory_open: int = 0
    excluded: dict[str, int] = field(default_factory=dict)

    def total(self) -> int:
        return (
            self.included
            + self.unresolved
            + self.failed_open
            + self.directory_open
            + sum(self.excluded.values())
        )


# Default exclusions; the categories come from what interpreter runtimes and
# package installers are known to touch, the concrete patterns are ours.
_DEFAULTS = [
    ("glob", "**/__pycache__/**", "python-cache"),
    ("glob", "**/*.pyc", "python-cache"),
    ("glob", "**/.ipynb_checkpoints/**", "notebook-checkpoint"),
    ("glob", "**/.cache/pip/**", "pip-cache"),
    ("glob", "**/pip/_internal/**", "pip-cache"),
    ("path_prefix", "/usr/lib/", "library-files"),
    ("path_prefix", "/usr/local/lib/", "library-files"),
    ("glob", "**/site-packages/**", "library-files"),
    ("glob", "**/dist-packages/**", "library-files"),
    ("path_prefix", "/proc/", "pseudo-filesystem"),
    ("path_prefix", "/sys/", "pseudo-filesystem"),
    ("path_prefix", "/dev/", "pseudo-filesystem"),
    ("path_prefix", "/etc/", "system-config"),
    ("glob", "**/locale/**", "system-config"),
    ("glob", "**/terminfo/**", "system-config"),
    ("glob", "**/*.so*", "shared-object"),
]


def default_rules(start_order: int = 1000) -> tuple[FilterRule, ...]:
    return tuple(
        FilterRule(start_order + 10 * i, Matcher(m), pattern, Action.EXCLUDE, reason)
        for i, (m, pattern, reason) in enumerate(_DEFAULTS)
    )


def load_rules(config_path: str | None = None) -> FilterConfig:
    """Build the filter config: user rules (if any) evaluated before defaults.

    The config file is a JSON array of rule objects, e.g.
    ``{"order":10,"matcher":"glob","pattern":"**/__pycache__/**",
    "action":"exclude","reason":"python-cache"}``.
    """
    defaults = default_rules()
    if config_path is None:
        return FilterConfig(rules=defaults)
    with open(config_path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FilterConfigError(
                f"{config_path}: invalid JSON at line {exc.lineno}: {exc.msg}"
            ) from exc
    if not isinstance(raw, list):
        raise FilterConfigError(f"{config_path}: expected a JSON array of rules")
    user_rules = []
    for i, obj in enumerate(raw):
        try:
            rule = FilterRule(
                order=int(obj["order"]),
                matcher=Matcher(obj["matcher"]),
                pattern=str(obj["pattern"]),
                action=Action(obj["action"]),
                reason=str(obj.get("reason", "")),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise FilterConfigError(f"{config_path}: rule #{i + 1}: {exc}") from exc
        user_rules.append(rule)
    user_rules.sort(key=lambda r: r.order)
    # user rules evaluate first; shift defaults after the largest user order
    shift = max((r.order for r in user_rules), default=0) + 1000
    shifted = tuple(
        FilterRule(shift + 10 * i, r.matcher, r.pattern, r.action, r.reason)
        for i, r in enumerate(defaults)
    )
    return FilterConfig(rules=tuple(user_rules) + shifted)


def classify(access: ResolvedAccess, config: FilterConfig) -> Decision:
    """First matching rule wins; otherwise the config's default action."""
    path = access.absolute_path
    if path is None:
        raise ValueError("classify needs a resolved absolute path")
    for rule in config.rules:
        if rule.matches(path):
            if rule.action is Action.INCLUDE:
                return Decision(include=True)
            return Decision(include=False, reason=rule.reason)
    return Decision(include=config.default_action is Action.INCLUDE)


def access_mode(flags: frozenset[str]) -> AccessMode:
    """Pinned flag-to-mode mapping: reads are inputs, everything else writes."""
    if flags & {"WRONLY", "RDWR", "CREAT", "TRUNC", "APPEND"}:
        return AccessMode.WRITTEN
    return AccessMode.READ


def _merge(a: AccessMode, b: AccessMode) -> AccessMode:
    if a is b:
        return a
    return AccessMode.READ_WRITE


def shortlist(
    accesses: list[ResolvedAccess],
    config: FilterConfig,
    stats: ShortlistStats | None = None,
) -> list[FileDependency]:
    """Deduplicated, filtered dependencies ordered by first appearance.

    Drops unresolved accesses, failed opens, and directory opens; merges
    repeat accesses of one path (read + written becomes read_write).
    """
    st = stats if stats is not None else ShortlistStats()
    seen: dict[str, dict] = {}
    for index, access in enumerate(accesses):
        if not access.resolved:
            st.unresolved += 1
            continue
        if not access.event.ok:
            st.failed_open += 1
            continue
        if "DIRECTORY" in access.event.flags:
            st.directory_open += 1
            continue
        decision = classify(access, config)
        if not decision.include:
            reason = decision.reason or "excluded"
            st.excluded[reason] = st.excluded.get(reason, 0) + 1
            continue
        st.included += 1
        mode = access_mode(access.event.flags)
        entry = seen.get(access.absolute_path)
        if entry is None:
            seen[access.absolute_path] = {
                "mode": mode, "first_seen": index, "count": 1,
            }
        else:
            entry["mode"] = _merge(entry["mode"], mode)
            entry["count"] += 1
    deps = [
        FileDependency(path, e["mode"], e["first_seen"], e["count"])
        for path, e in seen.items()
    ]
    deps.sort(key=lambda d: d.first_seen)
    return deps
