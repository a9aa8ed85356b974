"""Minimal reader for Unix ar containers (.deb, .ddeb and static libraries).

Handles the common GNU variant (``/`` symbol index, ``//`` extended names
table, ``/123`` name references) and BSD ``#1/<len>`` inline names.
"""

from __future__ import annotations

from typing import NamedTuple

from .errors import MalformedArchive, TruncatedMember

AR_MAGIC = b"!<arch>\n"
THIN_MAGIC = b"!<thin>\n"
HEADER_SIZE = 60

# Members that index the archive rather than carry payload.
SYMBOL_INDEX_NAMES = frozenset({"/", "/SYM64/", "__.SYMDEF", "__.SYMDEF SORTED"})
EXTENDED_NAMES = "//"


class ArMember(NamedTuple):
    name: str
    data: bytes
    mode: int


def is_ar(data: bytes) -> bool:
    return data[:8] == AR_MAGIC


def read_ar(data: bytes, *, keep_special: bool = False) -> list[ArMember]:
    """Return archive members in stored order.

    Symbol index and extended-name members are consumed; pass
    ``keep_special=True`` to receive them as well (with their raw names).
    """
    if data[:8] == THIN_MAGIC:
        raise MalformedArchive("thin archives reference external files")
    if data[:8] != AR_MAGIC:
        raise MalformedArchive("missing ar magic")

    members: list[ArMember] = []
    ext_names = b""
    pos = len(AR_MAGIC)
    end = len(data)
    while pos < end:
        if data[pos:pos + 1] == b"\n":
            # stray alignment byte at the very end
            pos += 1
            continue
        header = data[pos:pos + HEADER_SIZE]
        if len(header) < HEADER_SIZE:
            raise TruncatedMember(f"member header at offset {pos} is truncated")
        if header[58:60] != b"`\n":
            raise MalformedArchive(f"bad member terminator at offset {pos}")
        raw_name = header[0:16].decode("latin-1").rstrip(" ")
        try:
            size = int(header[48:58].decode("ascii").strip() or "0")
            mode_text = header[40:48].decode("ascii").strip()
            mode = int(mode_text, 8) if mode_text else 0
        except ValueError as exc:
            raise MalformedArchive(f"bad numeric field at offset {pos}") from exc
        body_start = pos + HEADER_SIZE
        body_end = body_start + size
        if body_end > end:
            raise TruncatedMember(
                f"member {raw_name!r} claims {size} bytes, only {end - body_start} remain"
            )
        body = data[body_start:body_end]
        pos = body_end + (size & 1)

        if raw_name == EXTENDED_NAMES:
            ext_names = body
            if keep_special:
                members.append(ArMember(raw_name, body, mode))
            continue
        if raw_name in SYMBOL_INDEX_NAMES:
            if keep_special:
                members.append(ArMember(raw_name, body, mode))
            continue

        if raw_name.startswith("#1/"):
            try:
                name_len = int(raw_name[3:])
            except ValueError as exc:
                raise MalformedArchive(f"bad BSD name {raw_name!r}") from exc
            if name_len > len(body):
                raise TruncatedMember(f"BSD name of {raw_name!r} exceeds member")
            name = body[:name_len].rstrip(b"\0").decode("utf-8", "surrogateescape")
            body = body[name_len:]
        elif raw_name.startswith("/") and raw_name[1:].isdigit():
            offset = int(raw_name[1:])
            if offset >= len(ext_names):
                raise MalformedArchive(f"extended name offset {offset} out of range")
            stop = ext_names.find(b"\n", offset)
            entry = ext_names[offset:stop if stop >= 0 else len(ext_names)]
            name = entry.rstrip(b"/").decode("utf-8", "surrogateescape")
        else:
            name = raw_name[:-1] if raw_name.endswith("/") else raw_name
        members.append(ArMember(name, body, mode))
    return members
