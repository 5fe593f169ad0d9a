"""Package captured state into a portable zip and restore it elsewhere.

Archive layout (all entries at the root):

- one entry per data file, named by a fresh 32-hex UUID
- ``files.json``      uuid -> {path, size, sha256}
- ``libraries.json``  package name -> version
- ``session.bin``     opaque serialized session (optional)
- the notebook under its original base name (optional)
- ``manifest.json``   format version, timestamps, content counts (written last)
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import uuid
import zipfile
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .filters import FileDependency

FORMAT_VERSION = 1
FILES_JSON = "files.json"
LIBRARIES_JSON = "libraries.json"
SESSION_BIN = "session.bin"
MANIFEST_JSON = "manifest.json"
_RESERVED = {FILES_JSON, LIBRARIES_JSON, SESSION_BIN, MANIFEST_JSON}
_UUID_RE = re.compile(r"^[0-9a-f]{32}$")

_HASH_CHUNK = 1 << 20


class ArchiveError(Exception):
    """Archive cannot be built or is not usable."""


class CorruptArchiveError(ArchiveError):
    pass


class UnsupportedVersionError(ArchiveError):
    pass


@dataclass(frozen=True)
class FileMapEntry:
    uuid: str
    original_path: str
    size: int
    sha256: str


@dataclass(frozen=True)
class LibraryDependency:
    name: str
    version: str


@dataclass(frozen=True)
class ArchiveManifest:
    format_version: int
    created_at: str
    notebook_name: str | None
    has_session: bool
    file_count: int
    library_count: int


@dataclass
class RestoreReport:
    placed: list[str] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    requirements_path: str | None = None


@dataclass(frozen=True)
class EntryCheck:
    uuid: str
    original_path: str
    ok: bool
    detail: str


@dataclass
class VerificationReport:
    entries: list[EntryCheck] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems and all(e.ok for e in self.entries)


def _sha256_file(path: str) -> tuple[str, int]:
    digest = hashlib.sha256()
    size = 0
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(_HASH_CHUNK)
            if not chunk:
                break
            digest.update(chunk)
            size += len(chunk)
    return digest.hexdigest(), size


def package(
    deps: list[FileDependency],
    libs: list[LibraryDependency],
    session_blob: bytes | None = None,
    notebook_path: str | None = None,
    out_path: str = "state.zip",
) -> ArchiveManifest:
    """Build the archive at ``out_path`` and return its manifest.

    Input files are only read, never touched.  Each data file is stored
    under a fresh UUID name so originals with equal base names cannot
    collide at the archive root.
    """
    paths = [d.absolute_path for d in deps]
    dupes = {p for p in paths if paths.count(p) > 1}
    if dupes:
        raise ArchiveError(f"duplicate dependency paths: {sorted(dupes)}")
    by_name: dict[str, str] = {}
    for lib in libs:
        if not lib.name:
            raise ArchiveError("library name must be nonempty")
        if lib.name in by_name and by_name[lib.name] != lib.version:
            raise ArchiveError(f"conflicting versions for library {lib.name!r}")
        by_name[lib.name] = lib.version

    notebook_name = None
    if notebook_path is not None:
        notebook_name = os.path.basename(notebook_path)
        if notebook_name in _RESERVED or _UUID_RE.match(notebook_name):
            raise ArchiveError(
                f"notebook base name {notebook_name!r} collides with archive entries"
            )

    file_map: dict[str, dict] = {}
    manifest = ArchiveManifest(
        format_version=FORMAT_VERSION,
        created_at=datetime.now(timezone.utc).isoformat(),
        notebook_name=notebook_name,
        has_session=session_blob is not None,
        file_count=len(deps),
        library_count=len(by_name),
    )
    with zipfile.ZipFile(out_path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for dep in deps:
            try:
                sha, size = _sha256_file(dep.absolute_path)
            except OSError as exc:
                raise ArchiveError(
                    f"cannot read dependency {dep.absolute_path}: {exc}"
                ) from exc
            name = uuid.uuid4().hex
            while name in file_map:
                name = uuid.uuid4().hex
            zf.write(dep.absolute_path, arcname=name)
            file_map[name] = {
                "path": dep.absolute_path, "size": size, "sha256": sha,
            }
        zf.writestr(FILES_JSON, json.dumps(file_map, indent=2, sort_keys=True))
        zf.writestr(LIBRARIES_JSON, json.dumps(by_name, indent=2, sort_keys=True))
        if session_blob is not None:
            zf.writestr(SESSION_BIN, session_blob)
        if notebook_path is not None:
            zf.write(notebook_path, arcname=notebook_name)
        zf.writestr(MANIFEST_JSON, json.dumps(manifest.__dict__, indent=2))
    return manifest


def _open_archive(archive_path: str) -> zipfile.ZipFile:
    try:
        return zipfile.ZipFile(archive_path, "r")
    except zipfile.BadZipFile as exc:
        raise CorruptArchiveError(f"{archive_path}: {exc}") from exc


def _load_json(zf: zipfile.ZipFile, name: str) -> dict:
    try:
        data = zf.read(name)
    except KeyError as exc:
        raise CorruptArchiveError(f"missing {name}") from exc
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise CorruptArchiveError(f"{name} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise CorruptArchiveError(f"{name} must be a JSON object")
    return obj


def read_manifest(
    archive_path: str,
) -> tuple[ArchiveManifest, list[FileMapEntry], list[LibraryDependency]]:
    """Parse archive metadata without extracting any data entries."""
    with _open_archive(archive_path) as zf:
        raw_manifest = _load_json(zf, MANIFEST_JSON)
        version = raw_manifest.get("format_version")
        if not isinstance(version, int):
            raise CorruptArchiveError("manifest has no integer format_version")
        if version > FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"archive format_version {version} is newer than supported {FORMAT_VERSION}"
            )
        files = _load_json(zf, FILES_JSON)
        libraries = _load_json(zf, LIBRARIES_JSON)
    entries = []
    for key in sorted(files):
        info = files[key]
        if not _UUID_RE.match(key) or not isinstance(info, dict):
            raise CorruptArchiveError(f"files.json entry {key!r} is malformed")
        entries.append(
            FileMapEntry(
                uuid=key,
                original_path=str(info.get("path", "")),
                size=int(info.get("size", -1)),
                sha256=str(info.get("sha256", "")),
            )
        )
    manifest = ArchiveManifest(
        format_version=version,
        created_at=str(raw_manifest.get("created_at", "")),
        notebook_name=raw_manifest.get("notebook_name"),
        has_session=bool(raw_manifest.get("has_session", False)),
        file_count=int(raw_manifest.get("file_count", len(entries))),
        library_count=int(raw_manifest.get("library_count", len(libraries))),
    )
    libs = [LibraryDependency(name, str(ver)) for name, ver in sorted(libraries.items())]
    return manifest, entries, libs


def _destination(original_path: str, dest_root: str | None) -> str:
    if dest_root is None:
        return original_path
    return os.path.join(dest_root, original_path.lstrip("/"))


def restore_files(
    archive_path: str,
    dest_root: str | None = None,
    overwrite: bool = False,
) -> RestoreReport:
    """Copy every data entry back to its original path (step 2 of a restore).

    With ``dest_root`` the original absolute paths are re-rooted under it,
    which is also the escape hatch for hosts whose filesystem layout does
    not match the capture machine.  Every copy is checksum-verified.
    """
    _, entries, _ = read_manifest(archive_path)
    report = RestoreReport()
    with _open_archive(archive_path) as zf:
        names = set(zf.namelist())
        for entry in entries:
            if entry.uuid not in names:
                raise CorruptArchiveError(f"data entry {entry.uuid} missing from archive")
            dest = _destination(entry.original_path, dest_root)
            if os.path.exists(dest) and not overwrite:
                report.skipped.append((dest, "exists"))
                continue
            parent = os.path.dirname(dest)
            if parent:
                os.makedirs(parent, exist_ok=True)
            digest = hashlib.sha256()
            with zf.open(entry.uuid) as src, open(dest, "wb") as dst:
                while True:
                    chunk = src.read(_HASH_CHUNK)
                    if not chunk:
                        break
                    digest.update(chunk)
                    dst.write(chunk)
            if digest.hexdigest() != entry.sha256:
                raise ArchiveError(
                    f"checksum mismatch restoring {entry.uuid} -> {dest}"
                )
            report.placed.append(dest)
    return report


def emit_requirements(archive_path: str, out_path: str) -> int:
    """Write one ``name==version`` pin per library, sorted, LF-terminated."""
    _, _, libs = read_manifest(archive_path)
    lines = [f"{lib.name}=={lib.version}\n" for lib in sorted(libs, key=lambda l: l.name)]
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(lines)
    return len(lines)


def verify(archive_path: str) -> VerificationReport:
    """Checksum every data entry and cross-check the manifest counts."""
    report = VerificationReport()
    manifest, entries, libs = read_manifest(archive_path)
    with _open_archive(archive_path) as zf:
        names = set(zf.namelist())
        for entry in entries:
            if entry.uuid not in names:
                report.entries.append(
                    EntryCheck(entry.uuid, entry.original_path, False, "missing data entry")
                )
                continue
            digest = hashlib.sha256()
            size = 0
            with zf.open(entry.uuid) as src:
                while True:
                    chunk = src.read(_HASH_CHUNK)
                    if not chunk:
                        break
                    digest.update(chunk)
                    size += len(chunk)
            if digest.hexdigest() != entry.sha256:
                report.entries.append(
                    EntryCheck(entry.uuid, entry.original_path, False, "sha256 mismatch")
                )
            elif size != entry.size:
                report.entries.append(
                    EntryCheck(entry.uuid, entry.original_path, False, "size mismatch")
                )
            else:
                report.entries.append(
                    EntryCheck(entry.uuid, entry.original_path, True, "ok")
                )
        known = {e.uuid for e in entries}
        stray = [
            n for n in names
            if _UUID_RE.match(n) and n not in known
        ]
        for name in stray:
            report.problems.append(f"data entry {name} not listed in {FILES_JSON}")
    if manifest.file_count != len(entries):
        report.problems.append(
            f"manifest file_count {manifest.file_count} != {len(entries)} entries"
        )
    if manifest.library_count != len(libs):
        report.problems.append(
            f"manifest library_count {manifest.library_count} != {len(libs)} libraries"
        )
    return report
