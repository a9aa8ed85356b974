"""Binary-file detection and ELF64 image loading."""

from __future__ import annotations

import bisect
import enum
import posixpath
import re
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .arfile import is_ar, read_ar
from .errors import MalformedArchive, MalformedElf, NonX86, TruncatedElf

ELF_MAGIC = b"\x7fELF"

ET_REL, ET_EXEC, ET_DYN = 1, 2, 3
EM_X86_64 = 62

SHT_NOBITS = 8
SHT_SYMTAB = 2
SHT_DYNSYM = 11
SHT_NOTE = 7
SHF_EXECINSTR = 0x4

PT_DYNAMIC = 2
PT_INTERP = 3
PT_NOTE = 4

DT_NULL = 0
DT_FLAGS_1 = 0x6FFFFFFB
DF_1_PIE = 0x08000000

STT_FUNC = 2
STT_GNU_IFUNC = 10
SHN_UNDEF = 0
SHN_LORESERVE = 0xFF00
SHN_XINDEX = 0xFFFF

NT_GNU_BUILD_ID = 3

_SHARED_NAME = re.compile(r"\.so(\.\d+)*$")


class BinaryKind(str, enum.Enum):
    EXECUTABLE = "executable"
    PIE_EXECUTABLE = "pie_executable"
    SHARED_LIBRARY = "shared_library"
    STATIC_ARCHIVE = "static_archive"


# --------------------------------------------------------------------------
# Detection

def _elf_layout(head: bytes) -> Optional[tuple[str, bool]]:
    """Return (endian prefix, is64) for an ELF header, None if not ELF."""
    if len(head) < 20 or head[:4] != ELF_MAGIC:
        return None
    cls, data = head[4], head[5]
    if cls not in (1, 2) or data not in (1, 2):
        return None
    return ("<" if data == 1 else ">"), cls == 2


def _dyn_is_pie(head: bytes, endian: str, is64: bool) -> Optional[bool]:
    """Interpreter header or DF_1_PIE present; None when *head* is too short."""
    if is64:
        if len(head) < 64:
            return None
        phoff, = struct.unpack_from(endian + "Q", head, 32)
        phentsize, phnum = struct.unpack_from(endian + "HH", head, 54)
        ph_fmt, dyn_fmt = endian + "IIQQQQQQ", endian + "qQ"
    else:
        if len(head) < 52:
            return None
        phoff, = struct.unpack_from(endian + "I", head, 28)
        phentsize, phnum = struct.unpack_from(endian + "HH", head, 42)
        ph_fmt, dyn_fmt = endian + "IIIIIIII", endian + "iI"
    if phnum == 0:
        return False
    if phoff + phnum * phentsize > len(head) or phentsize < struct.calcsize(ph_fmt):
        return None
    dynamic = None
    for i in range(phnum):
        fields = struct.unpack_from(ph_fmt, head, phoff + i * phentsize)
        p_type = fields[0]
        if p_type == PT_INTERP:
            return True
        if p_type == PT_DYNAMIC:
            if is64:
                dynamic = (fields[2], fields[5])  # offset, filesz
            else:
                dynamic = (fields[1], fields[4])
    if dynamic is None:
        return False
    off, size = dynamic
    entsize = struct.calcsize(dyn_fmt)
    if off + size > len(head):
        return None
    for pos in range(off, off + size - entsize + 1, entsize):
        tag, val = struct.unpack_from(dyn_fmt, head, pos)
        if tag == DT_NULL:
            break
        if tag == DT_FLAGS_1 and val & DF_1_PIE:
            return True
    return False


def detect_binary(path: str, mode_bits: int, head: bytes) -> Optional[BinaryKind]:
    """Decide whether a packaged file is a binary file, and of which kind.

    A file qualifies by name (``*.so``, ``*.so.N.M``, ``*.a``) regardless of
    permissions, or by having an execute bit set and an ELF header that a
    file-type probe would call an executable or PIE executable. Pass the whole
    content as *head* when possible: the PIE decision reads the program
    headers and dynamic segment, which may lie beyond the first 64 bytes.
    """
    base = posixpath.basename(path)
    if _SHARED_NAME.search(base):
        return BinaryKind.SHARED_LIBRARY
    if base.endswith(".a"):
        return BinaryKind.STATIC_ARCHIVE
    if not mode_bits & 0o111:
        return None
    layout = _elf_layout(head)
    if layout is None:
        return None
    endian, is64 = layout
    e_type, = struct.unpack_from(endian + "H", head, 16)
    if e_type == ET_EXEC:
        return BinaryKind.EXECUTABLE
    if e_type == ET_DYN and _dyn_is_pie(head, endian, is64):
        return BinaryKind.PIE_EXECUTABLE
    return None


# --------------------------------------------------------------------------
# ELF images

class SectionHeader(NamedTuple):
    index: int
    name: str
    type: int
    flags: int
    addr: int
    offset: int
    size: int
    link: int
    info: int
    addralign: int
    entsize: int


class ExecRange(NamedTuple):
    address: int
    data: bytes
    section_name: str

    @property
    def end(self) -> int:
        return self.address + len(self.data)


class FunctionSpan(NamedTuple):
    name: str
    start: int
    size: int
    in_text: bool = True

    @property
    def end(self) -> int:
        return self.start + self.size


UNATTRIBUTED = "<unattributed>"


@dataclass(frozen=True)
class ElfImage:
    kind: BinaryKind
    machine: str
    exec_ranges: tuple[ExecRange, ...]
    functions: tuple[FunctionSpan, ...]
    build_id: Optional[bytes] = None
    debug_link: Optional[str] = None
    debug_link_crc: Optional[int] = None
    elf_type: int = ET_EXEC
    sections: tuple[SectionHeader, ...] = field(default=(), repr=False)
    section_bases: dict = field(default_factory=dict, repr=False, compare=False)
    raw: bytes = field(default=b"", repr=False, compare=False)

    @property
    def has_debug_line(self) -> bool:
        return any(s.name in (".debug_line", ".zdebug_line") and s.type != SHT_NOBITS
                   for s in self.sections)

    def function_at(self, address: int) -> Optional[str]:
        """Name of the function span containing *address*, if any."""
        starts = self.__dict__.get("_starts")
        if starts is None:
            starts = [f.start for f in self.functions]
            object.__setattr__(self, "_starts", starts)
        i = bisect.bisect_right(starts, address) - 1
        if i >= 0:
            fn = self.functions[i]
            if fn.start <= address < fn.end:
                return fn.name
        return None


def _cstr(table: bytes, offset: int) -> str:
    end = table.find(b"\0", offset)
    if end < 0:
        end = len(table)
    return table[offset:end].decode("utf-8", "surrogateescape")


def _section_headers(content: bytes) -> list[SectionHeader]:
    shoff, = struct.unpack_from("<Q", content, 40)
    shentsize, shnum, shstrndx = struct.unpack_from("<HHH", content, 58)
    if shoff == 0:
        return []
    if shentsize < 64:
        raise MalformedElf(f"section header entry size {shentsize} too small")
    if shoff + 64 > len(content):
        raise TruncatedElf("section header table lies beyond end of file")
    first = struct.unpack_from("<IIQQQQIIQQ", content, shoff)
    if shnum == 0:
        shnum = first[5]
    if shstrndx == SHN_XINDEX:
        shstrndx = first[6]
    if shoff + shnum * shentsize > len(content):
        raise TruncatedElf("section header table lies beyond end of file")
    raw = [struct.unpack_from("<IIQQQQIIQQ", content, shoff + i * shentsize) for i in range(shnum)]
    strtab = b""
    if 0 < shstrndx < shnum:
        s = raw[shstrndx]
        strtab = content[s[4]:s[4] + s[5]]
    return [SectionHeader(i, _cstr(strtab, r[0]) if strtab else "", *r[1:]) for i, r in enumerate(raw)]


def _section_bytes(content: bytes, sec: SectionHeader) -> bytes:
    if sec.type == SHT_NOBITS:
        return b""
    if sec.offset + sec.size > len(content):
        raise TruncatedElf(f"section {sec.name} extends beyond end of file")
    return content[sec.offset:sec.offset + sec.size]


def _parse_notes(data: bytes) -> Optional[bytes]:
    pos = 0
    while pos + 12 <= len(data):
        namesz, descsz, ntype = struct.unpack_from("<III", data, pos)
        pos += 12
        name = data[pos:pos + namesz]
        pos += (namesz + 3) & ~3
        desc = data[pos:pos + descsz]
        pos += (descsz + 3) & ~3
        if ntype == NT_GNU_BUILD_ID and name.rstrip(b"\0") == b"GNU":
            return bytes(desc)
    return None


def read_build_id(content: bytes, sections: list[SectionHeader]) -> Optional[bytes]:
    for sec in sections:
        if sec.type == SHT_NOTE:
            found = _parse_notes(_section_bytes(content, sec))
            if found:
                return found
    if sections:
        return None
    # no section headers: fall back to PT_NOTE segments
    phoff, = struct.unpack_from("<Q", content, 32)
    phentsize, phnum = struct.unpack_from("<HH", content, 54)
    for i in range(phnum):
        at = phoff + i * phentsize
        if at + 56 > len(content):
            break
        p_type, _, p_offset, _, _, p_filesz, _, _ = struct.unpack_from("<IIQQQQQQ", content, at)
        if p_type == PT_NOTE:
            found = _parse_notes(content[p_offset:p_offset + p_filesz])
            if found:
                return found
    return None


def read_debug_link(content: bytes, sections: list[SectionHeader]) -> tuple[Optional[str], Optional[int]]:
    for sec in sections:
        if sec.name == ".gnu_debuglink":
            data = _section_bytes(content, sec)
            end = data.find(b"\0")
            if end <= 0:
                return None, None
            name = data[:end].decode("utf-8", "surrogateescape")
            crc_at = (end + 4) & ~3
            crc = struct.unpack_from("<I", data, crc_at)[0] if crc_at + 4 <= len(data) else None
            return name, crc
    return None, None


def _raw_function_symbols(content: bytes, sections: list[SectionHeader], sec_type: int):
    out = []
    for sec in sections:
        if sec.type != sec_type or sec.entsize not in (0, 24):
            continue
        data = _section_bytes(content, sec)
        strtab = b""
        if 0 < sec.link < len(sections):
            strtab = _section_bytes(content, sections[sec.link])
        usable = len(data) - len(data) % 24
        for st_name, st_info, _other, st_shndx, st_value, st_size in struct.iter_unpack(
            "<IBBHQQ", data[:usable]
        ):
            if (st_info & 0xF) not in (STT_FUNC, STT_GNU_IFUNC):
                continue
            if st_shndx == SHN_UNDEF or st_shndx >= SHN_LORESERVE or st_name == 0:
                continue
            name = _cstr(strtab, st_name)
            if name:
                out.append((name, st_value, st_size, st_shndx))
    return out


def resolve_function_spans(
    symbols: list[tuple[str, int, int, int]],
    section_extent: dict[int, tuple[int, int]],
    exec_ranges: tuple[ExecRange, ...] = (),
) -> tuple[FunctionSpan, ...]:
    """Turn (name, start, size, section) symbols into non-overlapping spans.

    Zero-size symbols extend to the next function start in their section (or
    the section end). Overlapping spans merge under the smallest name.
    """
    by_section: dict[int, list[int]] = {}
    for _, start, _, shndx in symbols:
        by_section.setdefault(shndx, []).append(start)
    for starts in by_section.values():
        starts.sort()

    spans = []
    for name, start, size, shndx in symbols:
        if size == 0:
            starts = by_section[shndx]
            i = bisect.bisect_right(starts, start)
            if i < len(starts):
                end = starts[i]
            else:
                sec_start, sec_end = section_extent.get(shndx, (start, start))
                end = sec_end if sec_end > start else start
            size = end - start
        spans.append((start, start + size, name))
    spans.sort()

    merged: list[list] = []
    for start, end, name in spans:
        if merged:
            last = merged[-1]
            if start < last[1] or start == last[0]:
                last[1] = max(last[1], end)
                last[2] = min(last[2], name)
                continue
        merged.append([start, end, name])

    range_starts = [r.address for r in exec_ranges]
    result = []
    for start, end, name in merged:
        i = bisect.bisect_right(range_starts, start) - 1
        inside = i >= 0 and end <= exec_ranges[i].end and start >= exec_ranges[i].address
        result.append(FunctionSpan(name, start, end - start, inside))
    return tuple(result)


def load_elf(content: bytes, kind: BinaryKind) -> ElfImage:
    """Parse an ELF64 little-endian x86-64 image.

    Raises TruncatedElf or MalformedElf for unusable content and NonX86 for
    foreign machines (callers still count the file, they just skip decoding).
    """
    if len(content) < 20:
        raise TruncatedElf(f"{len(content)} bytes is too short for an ELF header")
    if is_ar(content):
        raise MalformedElf("static archive content: unpack members first")
    layout = _elf_layout(content)
    if layout is None:
        raise MalformedElf("missing ELF magic")
    endian, is64 = layout
    machine, = struct.unpack_from(endian + "H", content, 18)
    if machine != EM_X86_64 or endian != "<" or not is64:
        raise NonX86(machine, None if machine != EM_X86_64 else "x32/big-endian x86-64 is not supported")
    if len(content) < 64:
        raise TruncatedElf(f"{len(content)} bytes is too short for an ELF64 header")
    e_type, = struct.unpack_from("<H", content, 16)
    sections = _section_headers(content)

    # relocatable objects: lay executable sections out back to back
    bases: dict[int, int] = {}
    if e_type == ET_REL:
        cursor = 0
        for sec in sections:
            if sec.flags & SHF_EXECINSTR and sec.type != SHT_NOBITS and sec.size:
                align = max(sec.addralign, 1)
                cursor = (cursor + align - 1) // align * align
                bases[sec.index] = cursor
                cursor += sec.size
    else:
        bases = {sec.index: sec.addr for sec in sections}

    ranges = []
    for sec in sections:
        if sec.flags & SHF_EXECINSTR and sec.type != SHT_NOBITS and sec.size:
            ranges.append(ExecRange(bases[sec.index], _section_bytes(content, sec), sec.name))
    ranges.sort(key=lambda r: (r.address, r.section_name))
    exec_ranges: list[ExecRange] = []
    for r in ranges:
        if exec_ranges and r.address < exec_ranges[-1].end:
            continue  # overlapping executable sections only occur in malformed files
        exec_ranges.append(r)
    exec_tuple = tuple(exec_ranges)

    symbols = _raw_function_symbols(content, sections, SHT_SYMTAB)
    if not symbols:
        symbols = _raw_function_symbols(content, sections, SHT_DYNSYM)
    extent = {}
    rebased = []
    for name, value, size, shndx in symbols:
        if shndx >= len(sections):
            continue
        sec = sections[shndx]
        if e_type == ET_REL:
            if shndx not in bases:
                continue
            value += bases[shndx]
        base = bases.get(shndx, sec.addr)
        extent[shndx] = (base, base + sec.size)
        rebased.append((name, value, size, shndx))
    functions = resolve_function_spans(rebased, extent, exec_tuple)

    debug_link, debug_crc = read_debug_link(content, sections)
    return ElfImage(
        kind=kind,
        machine="x86_64",
        exec_ranges=exec_tuple,
        functions=functions,
        build_id=read_build_id(content, sections),
        debug_link=debug_link,
        debug_link_crc=debug_crc,
        elf_type=e_type,
        sections=tuple(sections),
        section_bases=bases if e_type == ET_REL else {},
        raw=content,
    )


def unpack_static_archive(content: bytes) -> list[tuple[str, bytes]]:
    """Relocatable-object members of a static library, in stored order."""
    if not is_ar(content):
        raise MalformedArchive("not an ar archive")
    return [(m.name, m.data) for m in read_ar(content) if m.data[:4] == ELF_MAGIC]
