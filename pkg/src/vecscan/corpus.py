"""Package acquisition: .deb unpacking, index parsing, corpus walking and
debug-symbol companion lookup."""

from __future__ import annotations

import bz2
import fnmatch
import gzip
import hashlib
import io
import logging
import lzma
import os
import posixpath
import re
import tarfile
import threading
import time
import urllib.error
import urllib.parse
import urllib.request
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .arfile import read_ar
from .errors import (
    MalformedArchive,
    MalformedStanza,
    TruncatedMember,
    UnsafePath,
    UnsupportedCompression,
)

log = logging.getLogger(__name__)

COMPONENTS = ("main", "universe", "multiverse", "restricted", "unknown")
_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")
DEFAULT_REQUEST_DELAY_MS = 1000


@dataclass(frozen=True)
class PackageMeta:
    name: str
    version: str = ""
    repository_component: str = "unknown"
    filename: str = ""
    size_bytes: int = 0
    sha256: Optional[str] = None

    def __post_init__(self):
        if not self.name or "/" in self.name or "\\" in self.name:
            raise ValueError(f"invalid package name {self.name!r}")
        if self.repository_component not in COMPONENTS:
            raise ValueError(f"unknown repository component {self.repository_component!r}")
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be >= 0")
        if self.sha256 is not None and not _SHA256_RE.match(self.sha256):
            raise ValueError(f"sha256 must be 64 lowercase hex chars, got {self.sha256!r}")


@dataclass(frozen=True)
class FileEntry:
    path: str
    mode_bits: int
    content: bytes = field(repr=False)

    @property
    def executable(self) -> bool:
        return bool(self.mode_bits & 0o111)


@dataclass
class PackageArchive:
    meta: PackageMeta
    entries: list[FileEntry]
    warnings: list[str] = field(default_factory=list)

    def find(self, path: str) -> Optional[FileEntry]:
        for entry in self.entries:
            if entry.path == path:
                return entry
        return None


# --------------------------------------------------------------------------
# .deb unpacking

def _decompress(member_name: str, payload: bytes) -> bytes:
    suffix = member_name.rsplit(".", 1)[-1] if member_name.count(".") >= 2 else ""
    try:
        if suffix == "":
            return payload
        if suffix == "gz":
            return gzip.decompress(payload)
        if suffix == "xz":
            return lzma.decompress(payload)
        if suffix == "bz2":
            return bz2.decompress(payload)
        if suffix == "zst":
            import zstandard

            with zstandard.ZstdDecompressor().stream_reader(io.BytesIO(payload)) as reader:
                return reader.read()
    except (OSError, EOFError, lzma.LZMAError, zlib.error, ValueError) as exc:
        raise TruncatedMember(f"cannot decompress {member_name}: {exc}") from exc
    except Exception as exc:  # zstandard.ZstdError does not subclass the above
        if type(exc).__module__.startswith("zstandard"):
            raise TruncatedMember(f"cannot decompress {member_name}: {exc}") from exc
        raise
    raise UnsupportedCompression(f"{member_name}: codec {suffix!r} is not supported")


def normalize_member_path(name: str) -> str:
    """Map a tar member name to an absolute-style path, rejecting traversal."""
    parts = []
    for segment in name.replace("\\", "/").split("/"):
        if segment in ("", "."):
            continue
        if segment == "..":
            raise UnsafePath(f"path traversal in tar member {name!r}")
        parts.append(segment)
    return "/" + "/".join(parts)


def _open_tar(member_name: str, payload: bytes) -> Optional[tarfile.TarFile]:
    raw = _decompress(member_name, payload)
    if not raw.strip(b"\0"):
        return None
    try:
        return tarfile.open(fileobj=io.BytesIO(raw), mode="r:")
    except tarfile.TarError as exc:
        raise MalformedArchive(f"{member_name} is not a tar stream: {exc}") from exc


def parse_control_fields(text: str) -> dict[str, str]:
    fields: dict[str, str] = {}
    key = None
    for line in text.splitlines():
        if not line.strip():
            break
        if line[0] in " \t":
            if key is not None:
                fields[key] += "\n" + line.strip()
            continue
        key, _, value = line.partition(":")
        key = key.strip()
        fields[key] = value.strip()
    return fields


def _read_control(member_name: str, payload: bytes) -> dict[str, str]:
    tar = _open_tar(member_name, payload)
    if tar is None:
        return {}
    with tar:
        for info in tar:
            if info.isfile() and normalize_member_path(info.name) == "/control":
                handle = tar.extractfile(info)
                if handle is not None:
                    return parse_control_fields(handle.read().decode("utf-8", "replace"))
    return {}


def open_package(raw: bytes, meta: PackageMeta) -> PackageArchive:
    """Unpack a .deb/.ddeb image into its regular-file entries."""
    members = read_ar(raw)
    names = [m.name for m in members]
    if len(members) < 3 or names[0] != "debian-binary":
        raise MalformedArchive(f"expected debian-binary first, found {names[:1]}")
    control = next((m for m in members if m.name.startswith("control.tar")), None)
    data = next((m for m in members if m.name.startswith("data.tar")), None)
    if control is None or data is None:
        raise MalformedArchive(f"missing control/data tarball in members {names}")

    archive = PackageArchive(meta=meta, entries=[])
    fields = _read_control(control.name, control.data)
    for key, have in (("Package", meta.name), ("Version", meta.version)):
        stated = fields.get(key)
        if stated and have and stated != have:
            archive.warnings.append(f"{meta.name}: control {key} {stated!r} differs from {have!r}")

    tar = _open_tar(data.name, data.data)
    if tar is None:
        return archive
    entries: dict[str, FileEntry] = {}
    with tar:
        try:
            for info in tar:
                path = normalize_member_path(info.name)
                if not (info.isfile() or info.islnk()):
                    continue
                handle = tar.extractfile(info)
                content = handle.read() if handle is not None else b""
                entries[path] = FileEntry(path, info.mode & 0o7777, content)
        except tarfile.TarError as exc:
            raise TruncatedMember(f"{data.name}: {exc}") from exc
        except KeyError as exc:  # hard link to a missing member
            raise MalformedArchive(f"{data.name}: dangling hard link {exc}") from exc
    archive.entries = list(entries.values())
    return archive


# --------------------------------------------------------------------------
# Package index

def _component_from_filename(filename: str) -> str:
    parts = filename.split("/")
    if len(parts) > 2 and parts[0] == "pool" and parts[1] in COMPONENTS:
        return parts[1]
    return "unknown"


def _stanza_to_meta(fields: dict[str, str]) -> Optional[PackageMeta]:
    if not all(k in fields for k in ("Package", "Version", "Filename")):
        return None
    sha = fields.get("SHA256")
    size = fields.get("Size", "0")
    return PackageMeta(
        name=fields["Package"],
        version=fields["Version"],
        repository_component=_component_from_filename(fields["Filename"]),
        filename=fields["Filename"],
        size_bytes=int(size) if size.isdigit() else 0,
        sha256=sha.lower() if sha else None,
    )


def parse_repo_index(index_text: str) -> list[PackageMeta]:
    """Parse a ``Packages`` index into one PackageMeta per complete stanza."""
    result: list[PackageMeta] = []
    fields: dict[str, str] = {}
    key: Optional[str] = None
    lineno = 0

    def flush():
        meta = _stanza_to_meta(fields)
        if meta is not None:
            result.append(meta)

    for lineno, line in enumerate(index_text.splitlines(), 1):
        if not line.strip():
            if fields:
                flush()
            fields, key = {}, None
            continue
        if line[0] in " \t":
            if key is None:
                raise MalformedStanza(f"line {lineno}: continuation before any key")
            fields[key] += "\n" + line.strip()
            continue
        name, sep, value = line.partition(":")
        if not sep:
            raise MalformedStanza(f"line {lineno}: expected 'Key: value'")
        key = name.strip()
        if key == "Package" and key in fields:
            raise MalformedStanza(f"line {lineno}: duplicate Package key")
        fields[key] = value.strip()
    if fields:
        flush()
    return result


# --------------------------------------------------------------------------
# Corpus walking

def meta_from_filename(path: str, raw: Optional[bytes] = None) -> PackageMeta:
    """Synthesize metadata from a Debian ``name_version_arch.deb`` file name."""
    base = os.path.basename(path)
    stem = base.rsplit(".", 1)[0]
    parts = stem.split("_")
    name = parts[0] or stem
    version = urllib.parse.unquote(parts[1]) if len(parts) > 1 else ""
    return PackageMeta(
        name=name,
        version=version,
        filename=base,
        size_bytes=len(raw) if raw is not None else 0,
        sha256=hashlib.sha256(raw).hexdigest() if raw is not None else None,
    )


def package_paths(root: str) -> list[str]:
    """Every ``*.deb`` under *root*, sorted by path relative to *root*."""
    paths = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fname in filenames:
            if fname.endswith(".deb"):
                paths.append(os.path.join(dirpath, fname))
    paths.sort(key=lambda p: os.path.relpath(p, root))
    return paths


def find_repo_index(root: str) -> Optional[str]:
    """A ``Packages`` index (optionally compressed) at the corpus root."""
    for name in ("Packages", "Packages.gz", "Packages.xz", "Packages.bz2"):
        path = os.path.join(root, name)
        if os.path.isfile(path):
            return path
    return None


def read_repo_index(path: str) -> list[PackageMeta]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".gz"):
        raw = gzip.decompress(raw)
    elif path.endswith(".xz"):
        raw = lzma.decompress(raw)
    elif path.endswith(".bz2"):
        raw = bz2.decompress(raw)
    return parse_repo_index(raw.decode("utf-8", "replace"))


def enumerate_corpus(
    root: str,
    index: Optional[list[PackageMeta]] = None,
    on_warning: Optional[Callable[[str], None]] = None,
) -> Iterator[tuple[PackageMeta, bytes]]:
    """Yield every ``*.deb`` under *root* in lexicographic path order."""
    by_basename = {posixpath.basename(m.filename): m for m in index or ()}
    for path in package_paths(root):
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            msg = f"unreadable package {path}: {exc}"
            log.warning(msg)
            if on_warning is not None:
                on_warning(msg)
            continue
        meta = by_basename.get(os.path.basename(path)) or meta_from_filename(path, raw)
        yield meta, raw


# --------------------------------------------------------------------------
# Debug companions

def companion_basename(meta: PackageMeta, arch: str = "amd64") -> str:
    version = meta.version.split(":", 1)[-1]
    return f"{meta.name}-dbgsym_{version}_{arch}.ddeb"


class LocalDebugSource:
    def __init__(self, directory: str):
        self.directory = directory
        self._listing: Optional[list[str]] = None

    def _files(self) -> list[str]:
        if self._listing is None:
            found = []
            for dirpath, dirnames, filenames in os.walk(self.directory):
                dirnames.sort()
                found.extend(os.path.join(dirpath, f) for f in filenames if f.endswith(".ddeb"))
            self._listing = sorted(found)
        return self._listing

    def fetch(self, meta: PackageMeta) -> Optional[bytes]:
        pattern = f"{meta.name}-dbgsym*.ddeb"
        matches = [p for p in self._files() if fnmatch.fnmatchcase(os.path.basename(p), pattern)]
        if not matches:
            return None
        exact = companion_basename(meta)
        version_tag = urllib.parse.quote(meta.version.split(":", 1)[-1], safe="")
        preferred = [p for p in matches if os.path.basename(p) == exact]
        preferred = preferred or [p for p in matches if f"_{version_tag}_" in os.path.basename(p)]
        with open((preferred or matches)[0], "rb") as fh:
            return fh.read()


def _default_opener(url: str, timeout: float = 60.0) -> Optional[bytes]:
    # urllib honours http_proxy/https_proxy/no_proxy from the environment
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        if exc.code == 404:
            return None
        raise


class RemoteDebugSource:
    """Fetch ``.ddeb`` files from a mirror, spacing requests by *delay_ms*."""

    def __init__(
        self,
        base_url: str,
        delay_ms: int = DEFAULT_REQUEST_DELAY_MS,
        opener: Callable[[str], Optional[bytes]] = _default_opener,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        on_warning: Optional[Callable[[str], None]] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.delay = max(delay_ms, 0) / 1000.0
        self.opener = opener
        self.clock = clock
        self.sleep = sleep
        self.on_warning = on_warning
        self._last: Optional[float] = None
        self._lock = threading.Lock()

    def url_for(self, meta: PackageMeta) -> str:
        directory = posixpath.dirname(meta.filename)
        arch = "amd64"
        stem = posixpath.basename(meta.filename).rsplit(".", 1)[0].split("_")
        if len(stem) == 3:
            arch = stem[2]
        name = urllib.parse.quote(companion_basename(meta, arch), safe="_.-~+")
        return "/".join(p for p in (self.base_url, directory, name) if p)

    def fetch(self, meta: PackageMeta) -> Optional[bytes]:
        url = self.url_for(meta)
        with self._lock:
            if self._last is not None:
                wait = self._last + self.delay - self.clock()
                if wait > 0:
                    self.sleep(wait)
            self._last = self.clock()
            try:
                return self.opener(url)
            except (OSError, urllib.error.URLError) as exc:
                msg = f"retryable: fetching {url} failed: {exc}"
                log.warning(msg)
                if self.on_warning is not None:
                    self.on_warning(msg)
                return None


_remote_sources: dict[tuple[str, int], RemoteDebugSource] = {}


def make_debug_source(source: str, delay_ms: int = DEFAULT_REQUEST_DELAY_MS):
    if re.match(r"^[a-z][a-z0-9+.-]*://", source, re.I):
        key = (source, delay_ms)
        if key not in _remote_sources:
            _remote_sources[key] = RemoteDebugSource(source, delay_ms)
        return _remote_sources[key]
    return LocalDebugSource(source)


def fetch_debug_companion(meta: PackageMeta, source) -> Optional[bytes]:
    """Return the debug-symbol package for *meta*, or None if there is none.

    *source* is a local directory, a base URL, or an object with ``fetch``.
    """
    if isinstance(source, (str, os.PathLike)):
        source = make_debug_source(os.fspath(source))
    return source.fetch(meta)
