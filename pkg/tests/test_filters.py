"""Filter rules: defaults, first-match-wins ordering, shortlist merging."""

import json
import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from statecap.filters import (
    AccessMode,
    Action,
    FilterConfigError,
    FilterRule,
    Matcher,
    ShortlistStats,
    access_mode,
    classify,
    default_rules,
    load_rules,
    shortlist,
)
from statecap.tracelog import Dirfd, ResolvedAccess, SyscallEvent

DATA = os.path.join(os.path.dirname(__file__), "data")


def make_access(path, flags=("RDONLY",), ok=True, resolved=True, ts=0.0, pid=1):
    event = SyscallEvent(
        pid=pid, timestamp_s=ts, syscall="openat", dirfd=Dirfd(), path=path,
        flags=frozenset(flags), result_fd=3 if ok else None,
        errno_name=None if ok else "ENOENT",
    )
    if resolved:
        return ResolvedAccess(event, path)
    return ResolvedAccess(event, None, "truncated")


class TestDefaults:
    def test_at_least_ten_exclusions(self):
        config = load_rules(None)
        excludes = [r for r in config.rules if r.action is Action.EXCLUDE]
        assert len(excludes) >= 10

    def test_corpus_fully_classified(self):
        with open(os.path.join(DATA, "filter_corpus.json")) as fh:
            corpus = json.load(fh)
        assert len(corpus["excluded"]) == 30
        assert len(corpus["included"]) == 5
        config = load_rules(None)
        for path, category in corpus["excluded"].items():
            decision = classify(make_access(path), config)
            assert not decision.include, path
            assert decision.reason == category, (path, decision.reason)
        for path in corpus["included"]:
            assert classify(make_access(path), config).include, path

    def test_known_noise_paths(self):
        config = load_rules(None)
        for path, reason in [
            ("/home/u/proj/__pycache__/m.cpython-39.pyc", "python-cache"),
            ("/home/u/nb/.ipynb_checkpoints/Untitled-checkpoint.ipynb",
             "notebook-checkpoint"),
            ("/home/u/.cache/pip/wheels/ab/cd/pkg.whl", "pip-cache"),
        ]:
            decision = classify(make_access(path), config)
            assert (decision.include, decision.reason) == (False, reason)
        assert classify(make_access("/home/u/data/train.csv"), config).include


class TestLoadRules:
    def test_user_rules_evaluate_first(self, tmp_path):
        cfg = tmp_path / "rules.json"
        cfg.write_text(json.dumps([
            {"order": 10, "matcher": "glob", "pattern": "**/.cache/mydata/**",
             "action": "include", "reason": ""},
        ]))
        config = load_rules(str(cfg))
        assert config.rules[0].pattern == "**/.cache/mydata/**"
        # would hit the pip-cache exclusion without the user rule
        path = "/home/u/.cache/mydata/pip/_internal/f.bin"
        assert classify(make_access(path), config).include

    def test_unknown_matcher_rejected(self, tmp_path):
        cfg = tmp_path / "rules.json"
        cfg.write_text(json.dumps([
            {"order": 1, "matcher": "regexp", "pattern": "x", "action": "exclude",
             "reason": "r"},
        ]))
        with pytest.raises(FilterConfigError, match="#1"):
            load_rules(str(cfg))

    def test_malformed_json_names_line(self, tmp_path):
        cfg = tmp_path / "rules.json"
        cfg.write_text('[\n{"order": 1,\n  broken\n]')
        with pytest.raises(FilterConfigError, match="line 3"):
            load_rules(str(cfg))

    def test_exclude_needs_reason(self):
        with pytest.raises(FilterConfigError):
            FilterRule(1, Matcher.GLOB, "**/x/**", Action.EXCLUDE, "")


class TestOrdering:
    def test_first_match_wins_is_order_sensitive(self):
        include_first = (
            FilterRule(1, Matcher.SUBSTRING, "keep", Action.INCLUDE, ""),
            FilterRule(2, Matcher.SUBSTRING, "data", Action.EXCLUDE, "r"),
        )
        exclude_first = (
            FilterRule(1, Matcher.SUBSTRING, "data", Action.EXCLUDE, "r"),
            FilterRule(2, Matcher.SUBSTRING, "keep", Action.INCLUDE, ""),
        )
        from statecap.filters import FilterConfig

        path = "/data/keep.csv"
        assert classify(make_access(path), FilterConfig(include_first)).include
        assert not classify(make_access(path), FilterConfig(exclude_first)).include


class TestAccessMode:
    @pytest.mark.parametrize("flags,expected", [
        (("RDONLY",), AccessMode.READ),
        (("RDONLY", "CLOEXEC"), AccessMode.READ),
        (("WRONLY", "CREAT", "TRUNC"), AccessMode.WRITTEN),
        (("RDWR",), AccessMode.WRITTEN),
        (("RDONLY", "APPEND"), AccessMode.WRITTEN),
    ])
    def test_mapping(self, flags, expected):
        assert access_mode(frozenset(flags)) is expected


class TestShortlist:
    def test_read_then_write_merges(self):
        config = load_rules(None)
        accesses = [
            make_access("/tmp/f.dat", ("RDONLY",), ts=1.0),
            make_access("/tmp/f.dat", ("WRONLY", "CREAT"), ts=2.0),
        ]
        deps = shortlist(accesses, config)
        assert len(deps) == 1
        assert deps[0].mode is AccessMode.READ_WRITE
        assert deps[0].event_count == 2
        assert deps[0].first_seen == 0

    def test_failed_open_dropped(self):
        config = load_rules(None)
        stats = ShortlistStats()
        deps = shortlist([make_access("/tmp/f.dat", ok=False)], config, stats)
        assert deps == []
        assert stats.failed_open == 1

    def test_directory_open_dropped(self):
        config = load_rules(None)
        stats = ShortlistStats()
        deps = shortlist(
            [make_access("/tmp/somedir", ("RDONLY", "DIRECTORY"))], config, stats
        )
        assert deps == []
        assert stats.directory_open == 1

    def test_unresolved_dropped(self):
        config = load_rules(None)
        stats = ShortlistStats()
        assert shortlist([make_access("/x", resolved=False)], config, stats) == []
        assert stats.unresolved == 1

    def test_order_by_first_seen(self):
        config = load_rules(None)
        accesses = [
            make_access("/tmp/b.dat"),
            make_access("/tmp/a.dat"),
            make_access("/tmp/b.dat"),
        ]
        deps = shortlist(accesses, config)
        assert [d.absolute_path for d in deps] == ["/tmp/b.dat", "/tmp/a.dat"]

    def test_partition_invariant(self):
        config = load_rules(None)
        accesses = [
            make_access("/tmp/user.dat"),
            make_access("/etc/hosts"),
            make_access("/tmp/gone", ok=False),
            make_access("/x", resolved=False),
            make_access("/tmp/d", ("RDONLY", "DIRECTORY")),
            make_access("/usr/lib/python3.10/os.py"),
        ]
        stats = ShortlistStats()
        shortlist(accesses, config, stats)
        assert stats.total() == len(accesses)

    def test_idempotent(self):
        config = load_rules(None)
        accesses = [
            make_access("/tmp/a.dat", ("RDONLY",)),
            make_access("/tmp/b.dat", ("WRONLY", "CREAT")),
            make_access("/tmp/a.dat", ("WRONLY",)),
        ]
        first = shortlist(accesses, config)
        again = shortlist(
            [make_access(d.absolute_path,
                         ("RDONLY",) if d.mode is AccessMode.READ else
                         ("RDWR",) if d.mode is AccessMode.READ_WRITE else
                         ("WRONLY",))
             for d in first],
            config,
        )
        assert [d.absolute_path for d in again] == [d.absolute_path for d in first]

    @given(st.lists(
        st.tuples(st.sampled_from(["/tmp/a", "/tmp/b", "/etc/hosts", "/dev/null"]),
                  st.sampled_from([("RDONLY",), ("WRONLY", "CREAT"), ("RDWR",)])),
        max_size=20,
    ))
    @settings(max_examples=100, deadline=None)
    def test_deterministic_and_unique_paths(self, spec):
        config = load_rules(None)
        accesses = [make_access(p, f) for p, f in spec]
        first = shortlist(accesses, config)
        second = shortlist(accesses, config)
        assert first == second
        paths = [d.absolute_path for d in first]
        assert len(paths) == len(set(paths))
