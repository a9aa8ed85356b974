"""Source lineage of target instructions from DWARF line tables."""

from __future__ import annotations

import bisect
import io
import logging
import posixpath
import zlib
from typing import Callable, NamedTuple, Optional, Union

from .arfile import is_ar
from .binobj import ELF_MAGIC, ET_REL, ElfImage, _section_headers, read_build_id
from .corpus import PackageArchive, PackageMeta, open_package
from .errors import MalformedDebugInfo, ScanError

log = logging.getLogger(__name__)

LIBRARY_PREFIXES = ("/usr/include", "/usr/lib")
BUILD_ID_DIR = "/usr/lib/debug/.build-id"


class SourceLoc(NamedTuple):
    path: str
    line: int

    def __str__(self) -> str:
        return f"{self.path}:{self.line}"


class LineTable:
    """Half-open address ranges mapped to source locations."""

    def __init__(self, rows):
        starts, ends, locs = [], [], []
        for start, end, loc in sorted(rows, key=lambda r: (r[0], r[1])):
            if ends and start < ends[-1]:
                start = ends[-1]
            if end <= start:
                continue
            starts.append(start)
            ends.append(end)
            locs.append(loc)
        self._starts = starts
        self._ends = ends
        self._locs = locs

    def __len__(self) -> int:
        return len(self._starts)

    def __iter__(self):
        return iter(zip(self._starts, self._ends, self._locs))

    def resolve(self, address: int) -> Optional[SourceLoc]:
        i = bisect.bisect_right(self._starts, address) - 1
        if i >= 0 and address < self._ends[i]:
            return self._locs[i]
        return None


def resolve(table: Optional[LineTable], address: int) -> Optional[SourceLoc]:
    return table.resolve(address) if table is not None else None


def is_shared_library_origin(loc: Optional[SourceLoc]) -> bool:
    if loc is None or not loc.path.startswith("/"):
        return False
    path = posixpath.normpath(loc.path)
    return path.startswith(LIBRARY_PREFIXES)


# --------------------------------------------------------------------------
# DWARF

def _decode(value) -> str:
    if isinstance(value, bytes):
        return value.decode("utf-8", "surrogateescape")
    return str(value)


def _file_resolver(header, comp_dir: str) -> Callable[[int], str]:
    version = header["version"]
    dirs = [_decode(d) for d in header["include_directory"]]
    files = header["file_entry"]
    cache: dict[int, str] = {}

    def path_of(index: int) -> str:
        if index in cache:
            return cache[index]
        pos = index if version >= 5 else index - 1
        if not 0 <= pos < len(files):
            cache[index] = ""
            return ""
        entry = files[pos]
        name = _decode(entry.name)
        dir_index = entry.dir_index
        if version >= 5:
            directory = dirs[dir_index] if dir_index < len(dirs) else ""
        else:
            directory = comp_dir if dir_index == 0 else (
                dirs[dir_index - 1] if dir_index - 1 < len(dirs) else "")
        if not posixpath.isabs(name):
            if directory and not posixpath.isabs(directory) and comp_dir:
                directory = posixpath.join(comp_dir, directory)
            elif not directory:
                directory = comp_dir
            name = posixpath.join(directory, name) if directory else name
        cache[index] = posixpath.normpath(name) if name else ""
        return cache[index]

    return path_of


def line_rows_from_elf(raw: bytes, address_bias: int = 0) -> list[tuple[int, int, SourceLoc]]:
    """Materialize (start, end, loc) rows from every CU's line program."""
    from elftools.common.exceptions import ELFError
    from elftools.elf.elffile import ELFFile

    rows = []
    try:
        elf = ELFFile(io.BytesIO(raw))
        if not elf.has_dwarf_info():
            return rows
        dwarf = elf.get_dwarf_info(relocate_dwarf_sections=True)
        for cu in dwarf.iter_CUs():
            program = dwarf.line_program_for_CU(cu)
            if program is None:
                continue
            top = cu.get_top_DIE()
            comp_attr = top.attributes.get("DW_AT_comp_dir")
            comp_dir = _decode(comp_attr.value) if comp_attr is not None else ""
            path_of = _file_resolver(program.header, comp_dir)
            prev = None
            for entry in program.get_entries():
                state = entry.state
                if state is None:
                    continue
                if prev is not None and state.address > prev.address:
                    path = path_of(prev.file)
                    if path:
                        rows.append((prev.address + address_bias, state.address + address_bias,
                                     SourceLoc(path, prev.line)))
                prev = None if state.end_sequence else state
    except (ELFError, ValueError, KeyError, IndexError, AttributeError, TypeError) as exc:
        raise MalformedDebugInfo(str(exc)) from exc
    except Exception as exc:  # construct.ConstructError and friends
        if type(exc).__module__.split(".")[0] in ("construct", "elftools"):
            raise MalformedDebugInfo(str(exc)) from exc
        raise
    return rows


# --------------------------------------------------------------------------
# Companion matching

def build_id_path(build_id: bytes) -> str:
    h = build_id.hex()
    return f"{BUILD_ID_DIR}/{h[:2]}/{h[2:]}.debug"


def _elf_identity(raw: bytes) -> tuple[Optional[bytes], int]:
    try:
        sections = _section_headers(raw)
        return read_build_id(raw, sections), zlib.crc32(raw)
    except (ScanError, ValueError, IndexError):
        return None, zlib.crc32(raw)


def find_debug_file(
    image: ElfImage,
    companion: Union[bytes, PackageArchive],
    warn: Callable[[str], None],
) -> Optional[bytes]:
    """Pick the separate debug file for *image* out of a companion.

    Build-id identity is preferred; the debug-link name (with its CRC) is
    the fallback when the image carries no build-id.
    """
    if isinstance(companion, (bytes, bytearray)):
        if is_ar(companion):
            try:
                companion = open_package(bytes(companion), PackageMeta("debug-companion"))
            except ScanError as exc:
                warn(f"debug companion unusable: {exc}")
                return None
        elif companion[:4] == ELF_MAGIC:
            build_id, crc = _elf_identity(bytes(companion))
            if image.build_id is not None:
                if build_id != image.build_id:
                    warn("debug companion build-id does not match image")
                    return None
                return bytes(companion)
            if image.debug_link_crc is not None and crc != image.debug_link_crc:
                warn("debug companion CRC does not match debug link")
                return None
            return bytes(companion)
        else:
            warn("debug companion is neither a package nor an ELF file")
            return None

    if image.build_id is not None:
        entry = companion.find(build_id_path(image.build_id))
        if entry is not None:
            return entry.content
        warn(f"no debug file with build-id {image.build_id.hex()} in companion")
        return None
    if image.debug_link:
        for entry in companion.entries:
            if posixpath.basename(entry.path) == image.debug_link:
                if image.debug_link_crc is not None and zlib.crc32(entry.content) != image.debug_link_crc:
                    continue
                return entry.content
    warn("no matching debug file in companion")
    return None


def load_line_table(
    image: ElfImage,
    debug_companion: Union[bytes, PackageArchive, None] = None,
    on_warning: Optional[Callable[[str], None]] = None,
) -> Optional[LineTable]:
    """Line table from the image's own debug info, else from its companion."""

    def warn(msg: str):
        log.warning(msg)
        if on_warning is not None:
            on_warning(msg)

    bias = 0
    if image.elf_type == ET_REL:
        if len(image.exec_ranges) != 1:
            if image.has_debug_line and len(image.exec_ranges) > 1:
                warn("line info of relocatable objects with several code sections is ambiguous")
            return None
        bias = image.exec_ranges[0].address

    source = None
    if image.has_debug_line:
        source = image.raw
    elif debug_companion is not None:
        source = find_debug_file(image, debug_companion, warn)
    if source is None:
        return None
    try:
        rows = line_rows_from_elf(source, bias)
    except MalformedDebugInfo as exc:
        warn(f"malformed debug info: {exc}")
        return None
    if not rows:
        return None
    return LineTable(rows)
