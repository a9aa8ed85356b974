"""The scanning pipeline: packages -> binaries -> instructions -> hits."""

from __future__ import annotations

import hashlib
import logging
import os
import stat
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Union

from .binobj import BinaryKind, detect_binary, load_elf, unpack_static_archive
from .classify import ISA_MODES, TargetHit, classify, is_repne_string_move
from .corpus import (
    DEFAULT_REQUEST_DELAY_MS,
    PackageArchive,
    PackageMeta,
    fetch_debug_companion,
    find_repo_index,
    make_debug_source,
    meta_from_filename,
    open_package,
    package_paths,
    read_repo_index,
)
from .decode import decode_candidates
from .errors import (
    EmptyCorpus,
    MalformedArchive,
    MalformedElf,
    NonX86,
    NotABinary,
    ScanError,
)
from .lineage import is_shared_library_origin, load_line_table
from .metrics import FOREIGN_ARCH, OK, PARSE_ERROR, BinaryReport, CorpusReport, combine_reports

log = logging.getLogger(__name__)

FORMATS = ("json", "csv", "both")
LAYOUTS = ("packages", "tree")
MNEMONIC_MODES = ("corpus", "binary-mean")


@dataclass(frozen=True)
class ScanConfig:
    corpus_root: str
    output_dir: str = "vecscan-out"
    debug_source: Optional[str] = None
    format: str = "both"
    isa_mode: str = "encoding"
    top_k: int = 10
    jobs: int = 1
    request_delay_ms: int = DEFAULT_REQUEST_DELAY_MS
    layout: str = "packages"
    mnemonic_mode: str = "corpus"
    follow_symlinks: bool = False

    def __post_init__(self):
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.request_delay_ms < 0:
            raise ValueError("request_delay_ms must be >= 0")
        for value, allowed, what in (
            (self.format, FORMATS, "format"),
            (self.isa_mode, ISA_MODES, "isa_mode"),
            (self.layout, LAYOUTS, "layout"),
            (self.mnemonic_mode, MNEMONIC_MODES, "mnemonic_mode"),
        ):
            if value not in allowed:
                raise ValueError(f"{what} must be one of {allowed}, got {value!r}")


class BinaryScan(NamedTuple):
    report: BinaryReport
    hits: list
    warnings: list


# --------------------------------------------------------------------------
# One binary

def _scan_elf(path, package, content, kind, isa_mode, companion, keep_hits):
    warnings: list[str] = []
    try:
        image = load_elf(content, kind)
    except NonX86 as exc:
        warnings.append(f"{package}:{path}: skipped, {exc}")
        return BinaryScan(BinaryReport(path, package, kind=kind.value, status=FOREIGN_ARCH), [], warnings)
    except MalformedElf as exc:
        warnings.append(f"{package}:{path}: unparseable ELF, {exc}")
        return BinaryScan(BinaryReport(path, package, kind=kind.value, status=PARSE_ERROR), [], warnings)

    table = None
    if image.has_debug_line or companion is not None:
        table = load_line_table(image, companion,
                                on_warning=lambda m: warnings.append(f"{package}:{path}: {m}"))

    counts = {"ins": 0, "bad": 0, "repne": 0}
    kept: list[TargetHit] = []

    def hits():
        for rng in image.exec_ranges:
            swept = decode_candidates(rng.data, rng.address)
            counts["ins"] += swept.n_instructions
            counts["bad"] += swept.n_invalid
            for inst in swept.candidates:
                hit = classify(inst, isa_mode)
                if hit is None:
                    if is_repne_string_move(inst):
                        counts["repne"] += 1
                    continue
                if table is not None:
                    loc = table.resolve(hit.address)
                    if loc is not None:
                        hit = hit.with_lineage(loc)
                if keep_hits:
                    kept.append(hit)
                yield hit

    report = BinaryReport.from_hits(
        path, package, hits(),
        function_of=image.function_at,
        is_library=is_shared_library_origin,
        kind=kind.value,
    )
    report.n_instructions = counts["ins"]
    report.n_invalid = counts["bad"]
    report.n_repne_movs = counts["repne"]
    if counts["repne"]:
        warnings.append(f"{package}:{path}: {counts['repne']} repne-prefixed movs not counted as targets")
    return BinaryScan(report, kept, warnings)


def scan_content(
    path: str,
    package: str,
    content: bytes,
    kind: BinaryKind,
    isa_mode: str = "encoding",
    companion: Union[bytes, PackageArchive, None] = None,
    keep_hits: bool = False,
) -> BinaryScan:
    """Scan one detected binary file. A static archive is reported as the
    union of its object members."""
    if kind != BinaryKind.STATIC_ARCHIVE:
        return _scan_elf(path, package, content, kind, isa_mode, companion, keep_hits)
    try:
        members = unpack_static_archive(content)
    except MalformedArchive as exc:
        return BinaryScan(
            BinaryReport(path, package, kind=kind.value, status=PARSE_ERROR),
            [], [f"{package}:{path}: unreadable static archive, {exc}"],
        )
    parts, hits, warnings = [], [], []
    for name, data in members:
        sub = _scan_elf(f"{path}({name})", package, data, kind, isa_mode, companion, keep_hits)
        parts.append(sub.report)
        hits.extend(sub.hits)
        warnings.extend(sub.warnings)
    report = combine_reports(path, package, parts, kind=kind.value)
    return BinaryScan(report, hits, warnings)


def _raw_scan(path, content, isa_mode, keep_hits) -> BinaryScan:
    """Forced scan of a non-ELF file: the whole content is swept as code."""
    kind = BinaryKind.EXECUTABLE
    swept = decode_candidates(content, 0)
    hits, repne = [], 0
    for inst in swept.candidates:
        hit = classify(inst, isa_mode)
        if hit is not None:
            hits.append(hit)
        elif is_repne_string_move(inst):
            repne += 1
    report = BinaryReport.from_hits(
        path, "<single>", hits, swept.n_instructions, kind=kind.value,
        n_invalid=swept.n_invalid, n_repne_movs=repne,
    )
    return BinaryScan(report, hits if keep_hits else [], [f"{path}: not a binary file, swept as raw code"])


def scan_binary_detailed(
    source: Union[str, os.PathLike, bytes],
    force: bool = False,
    isa_mode: str = "encoding",
    debug_companion: Optional[bytes] = None,
    name: Optional[str] = None,
    keep_hits: bool = True,
) -> BinaryScan:
    if isinstance(source, (bytes, bytearray)):
        content = bytes(source)
        path = name or "<bytes>"
        mode_bits = 0o755
    else:
        path = os.fspath(source)
        with open(path, "rb") as fh:
            content = fh.read()
        mode_bits = stat.S_IMODE(os.stat(path).st_mode)
        name = name or path
    kind = detect_binary(name or path, mode_bits, content)
    if kind is None:
        if not force:
            raise NotABinary(f"{path} is not a binary file")
        if content[:4] == b"\x7fELF":
            kind = BinaryKind.EXECUTABLE
        elif content[:8] == b"!<arch>\n":
            kind = BinaryKind.STATIC_ARCHIVE
        else:
            return _raw_scan(path, content, isa_mode, keep_hits)
    return scan_content(path, "<single>", content, kind, isa_mode, debug_companion, keep_hits)


def scan_binary(
    source: Union[str, os.PathLike, bytes],
    force: bool = False,
    isa_mode: str = "encoding",
    debug_companion: Optional[bytes] = None,
) -> BinaryReport:
    return scan_binary_detailed(source, force, isa_mode, debug_companion, keep_hits=False).report


# --------------------------------------------------------------------------
# Work units

class UnitResult(NamedTuple):
    packages: list          # [(PackageMeta, n_binaries)]
    reports: list           # [BinaryReport]
    warnings: list
    digests: list           # [(relative path, sha256)]


def _scan_package_file(task) -> UnitResult:
    path, rel, meta, debug_source, delay_ms, isa_mode = task
    warnings: list[str] = []
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        return UnitResult([], [], [f"{rel}: unreadable package, {exc}"], [])
    digest = hashlib.sha256(raw).hexdigest()
    if meta is None:
        meta = meta_from_filename(path, raw)
    try:
        archive = open_package(raw, meta)
    except ScanError as exc:
        return UnitResult([(meta, 0)], [], [f"{rel}: unreadable package, {exc}"], [(rel, digest)])
    warnings.extend(f"{rel}: {w}" for w in archive.warnings)

    detected = []
    for entry in sorted(archive.entries, key=lambda e: e.path):
        kind = detect_binary(entry.path, entry.mode_bits, entry.content)
        if kind is not None:
            detected.append((entry, kind))

    companion = None
    if detected and debug_source:
        try:
            source = make_debug_source(debug_source, delay_ms)
            raw_companion = fetch_debug_companion(meta, source)
            if raw_companion is not None:
                companion = open_package(raw_companion, PackageMeta(meta.name + "-dbgsym"))
        except (ScanError, OSError) as exc:
            warnings.append(f"{rel}: debug companion unavailable, {exc}")

    reports = []
    for entry, kind in detected:
        result = scan_content(entry.path, meta.name, entry.content, kind, isa_mode, companion)
        reports.append(result.report)
        warnings.extend(result.warnings)
    return UnitResult([(meta, len(detected))], reports, warnings, [(rel, digest)])


def _scan_tree_files(task) -> UnitResult:
    files, package, isa_mode = task
    reports, warnings, digests = [], [], []
    for path, rel in files:
        try:
            st = os.stat(path)
            with open(path, "rb") as fh:
                content = fh.read()
        except OSError as exc:
            warnings.append(f"{rel}: unreadable, {exc}")
            continue
        digests.append((rel, hashlib.sha256(content).hexdigest()))
        kind = detect_binary(path, stat.S_IMODE(st.st_mode), content)
        if kind is None:
            continue
        result = scan_content("/" + rel, package, content, kind, isa_mode)
        reports.append(result.report)
        warnings.extend(result.warnings)
    return UnitResult([], reports, warnings, digests)


def _package_tasks(config: ScanConfig, warnings: list):
    root = config.corpus_root
    index_path = find_repo_index(root)
    by_basename = {}
    if index_path is not None:
        try:
            by_basename = {os.path.basename(m.filename): m for m in read_repo_index(index_path)}
        except (ScanError, OSError, ValueError) as exc:
            warnings.append(f"{os.path.basename(index_path)}: ignored, {exc}")
    tasks = []
    for path in package_paths(root):
        rel = os.path.relpath(path, root).replace(os.sep, "/")
        meta = by_basename.get(os.path.basename(path))
        tasks.append((path, rel, meta, config.debug_source, config.request_delay_ms, config.isa_mode))
    return tasks


TREE_CHUNK_BYTES = 32 << 20


def _tree_tasks(config: ScanConfig):
    """Regular files under the root, batched by size. Symlinks are skipped
    (so each file is scanned once) unless follow_symlinks is set, in which
    case a link to a regular file is scanned under the link's path."""
    root = config.corpus_root
    package = os.path.basename(os.path.normpath(os.path.abspath(root))) or "root"
    files = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fname in filenames:
            path = os.path.join(dirpath, fname)
            try:
                st = os.stat(path) if config.follow_symlinks else os.lstat(path)
            except OSError:
                continue
            if stat.S_ISREG(st.st_mode):
                files.append((os.path.relpath(path, root).replace(os.sep, "/"), path, st.st_size))
    files.sort()
    tasks, batch, size = [], [], 0
    for rel, path, nbytes in files:
        batch.append((path, rel))
        size += nbytes
        if size >= TREE_CHUNK_BYTES:
            tasks.append((batch, package, config.isa_mode))
            batch, size = [], 0
    if batch:
        tasks.append((batch, package, config.isa_mode))
    return package, tasks


def _run_units(fn, tasks: list, jobs: int) -> Iterable[UnitResult]:
    if jobs == 1 or len(tasks) <= 1:
        return map(fn, tasks)
    pool = ProcessPoolExecutor(max_workers=jobs)

    def ordered():
        with pool:
            yield from pool.map(fn, tasks, chunksize=1)

    return ordered()


@dataclass
class ScanOutcome:
    report: CorpusReport
    packages: list = field(default_factory=list)     # [(PackageMeta, n_binaries)]
    warnings: list = field(default_factory=list)
    corpus_hash: str = ""


def collect(config: ScanConfig) -> ScanOutcome:
    """Scan the corpus and reduce per-binary reports into one CorpusReport."""
    if not os.path.isdir(config.corpus_root):
        raise EmptyCorpus(f"corpus root {config.corpus_root} is not a directory")
    warnings: list[str] = []
    report = CorpusReport()
    packages: list = []
    digests: list = []
    if config.layout == "tree":
        package, tasks = _tree_tasks(config)
        fn = _scan_tree_files
    else:
        tasks = _package_tasks(config, warnings)
        fn = _scan_package_file
    for unit in _run_units(fn, tasks, config.jobs):
        duplicate = [m for m, _ in unit.packages if m.name in report.packages]
        if duplicate:
            warnings.append(f"package {duplicate[0].name} {duplicate[0].version} appears more than once, skipped")
            continue
        for meta, n_binaries in unit.packages:
            report.add_package(meta.name)
            packages.append((meta, n_binaries))
        for binary in unit.reports:
            report.add_binary(binary)
        warnings.extend(unit.warnings)
        digests.extend(unit.digests)
    if config.layout == "tree" and digests:
        report.add_package(package)
        packages.append((PackageMeta(package), len(report.binaries)))
    if not report.packages:
        raise EmptyCorpus(f"no packages found under {config.corpus_root}")
    h = hashlib.sha256()
    for rel, digest in sorted(digests):
        h.update(f"{rel}\0{digest}\n".encode("utf-8", "surrogateescape"))
    return ScanOutcome(report, packages, warnings, h.hexdigest())
