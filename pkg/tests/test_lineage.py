import os
import subprocess

import pytest

from conftest import needs_cc, needs_dpkg
from fixtures import CC, build_deb, build_id_of, run, split_debug
from vecscan.binobj import BinaryKind, load_elf, unpack_static_archive
from vecscan.classify import classify
from vecscan.decode import decode_candidates
from vecscan.lineage import (
    LineTable,
    SourceLoc,
    build_id_path,
    is_shared_library_origin,
    load_line_table,
    resolve,
)

pytestmark = needs_cc


def addr2line(binary, addresses):
    out = subprocess.run(["addr2line", "-e", str(binary), *[hex(a) for a in addresses]],
                         capture_output=True, text=True, check=True).stdout.splitlines()
    return [line.split(" (discriminator")[0] for line in out]


def target_addresses(image):
    found = []
    for rng in image.exec_ranges:
        for inst in decode_candidates(rng.data, rng.address).candidates:
            if classify(inst) is not None:
                found.append(inst.address)
    return found


def main_address(binary):
    out = subprocess.run(["nm", str(binary)], capture_output=True, text=True, check=True).stdout
    return next(int(a, 16) for a, _, n in (l.split() for l in out.splitlines() if len(l.split()) == 3)
                if n == "main")


def test_main_resolves_to_fixture_source(debug_binary):
    image = load_elf(debug_binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    table = load_line_table(image)
    addr = main_address(debug_binary)
    loc = table.resolve(addr)
    assert loc == SourceLoc(str(debug_binary.parent / "debugprog.c"), 4)
    assert str(loc) == addr2line(debug_binary, [addr])[0]


def test_every_target_matches_addr2line(debug_binary):
    image = load_elf(debug_binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    table = load_line_table(image)
    addrs = target_addresses(image)
    assert len(addrs) >= 5
    ours = [str(table.resolve(a)) for a in addrs]
    assert ours == addr2line(debug_binary, addrs)
    # the intrinsics come from the compiler's own header
    assert any(is_shared_library_origin(table.resolve(a)) for a in addrs)
    assert any(not is_shared_library_origin(table.resolve(a)) for a in addrs)


def test_stripped_without_companion_is_absent(split_binary):
    binary, _ = split_binary
    image = load_elf(binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    assert load_line_table(image) is None


def test_companion_elf_matched_by_build_id(split_binary):
    binary, dbg = split_binary
    image = load_elf(binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    table = load_line_table(image, dbg.read_bytes())
    addr = main_address(dbg)
    assert table.resolve(addr).line == 4


@needs_dpkg
def test_companion_ddeb_matched_by_build_id(split_binary, tmp_path):
    binary, dbg = split_binary
    build_id = build_id_of(binary.read_bytes())
    ddeb = build_deb(tmp_path, "splitprog-dbgsym", "1", {build_id_path(build_id): (dbg.read_bytes(), 0o644)},
                     suffix=".ddeb")
    image = load_elf(binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    table = load_line_table(image, ddeb.read_bytes())
    assert table is not None
    addrs = target_addresses(image)
    assert [str(table.resolve(a)) for a in addrs] == addr2line(dbg, addrs)


def test_companion_with_other_build_id_is_rejected(split_binary, debug_binary):
    binary, _ = split_binary
    image = load_elf(binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    warnings = []
    assert load_line_table(image, debug_binary.read_bytes(), on_warning=warnings.append) is None
    assert warnings and "build-id" in warnings[0]


@needs_dpkg
def test_companion_matched_by_debug_link(tmp_path):
    binary = tmp_path / "linkonly"
    src = tmp_path / "linkonly.c"
    src.write_text("double f(double x) { return x * 2; }\nint main(void) { return (int)f(1.5); }\n")
    run(CC, "-O0", "-g", "-Wl,--build-id=none", "-o", binary, src)
    dbg = split_debug(binary)
    image = load_elf(binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    assert image.build_id is None
    ddeb = build_deb(tmp_path, "linkonly-dbgsym", "1",
                     {f"/usr/lib/debug/usr/bin/{dbg.name}": (dbg.read_bytes(), 0o644)}, suffix=".ddeb")
    table = load_line_table(image, ddeb.read_bytes())
    assert table is not None
    addrs = target_addresses(image)
    assert [str(table.resolve(a)) for a in addrs] == addr2line(dbg, addrs)
    # a debug file whose CRC does not match the link is not used
    bad = build_deb(tmp_path, "linkonly-dbgsym", "2",
                    {f"/usr/lib/debug/usr/bin/{dbg.name}": (dbg.read_bytes() + b"\0", 0o644)}, suffix=".ddeb")
    warnings = []
    assert load_line_table(image, bad.read_bytes(), on_warning=warnings.append) is None
    assert warnings


def test_malformed_debug_info_is_a_warning(debug_binary):
    raw = bytearray(debug_binary.read_bytes())
    image = load_elf(bytes(raw), BinaryKind.PIE_EXECUTABLE)
    sec = next(s for s in image.sections if s.name == ".debug_line")
    raw[sec.offset:sec.offset + sec.size] = b"\xff" * sec.size
    broken = load_elf(bytes(raw), BinaryKind.PIE_EXECUTABLE)
    warnings = []
    assert load_line_table(broken, on_warning=warnings.append) is None
    assert warnings and "malformed" in warnings[0]


def test_relative_source_paths_join_compilation_dir(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "rel.c").write_text("float g(float x) { return x + 1.0f; }\nint main(void) { return (int)g(2); }\n")
    run(CC, "-O0", "-g", "-o", "relprog", "sub/rel.c", cwd=tmp_path)
    binary = tmp_path / "relprog"
    image = load_elf(binary.read_bytes(), BinaryKind.PIE_EXECUTABLE)
    loc = load_line_table(image).resolve(main_address(binary))
    assert loc.path == os.path.join(str(tmp_path), "sub", "rel.c")


def test_relocatable_member_lines(tmp_path):
    src = tmp_path / "m.c"
    src.write_text("double h(double a) {\n  return a * 3.0;\n}\n")
    run(CC, "-O0", "-g", "-c", "-o", "m.o", "m.c", cwd=tmp_path)
    run("ar", "rcs", "libm1.a", "m.o", cwd=tmp_path)
    (_, obj), = unpack_static_archive((tmp_path / "libm1.a").read_bytes())
    image = load_elf(obj, BinaryKind.STATIC_ARCHIVE)
    table = load_line_table(image)
    lines = {table.resolve(a).line for a in target_addresses(image)}
    assert lines and lines <= {1, 2, 3}
    assert all(table.resolve(a).path == str(src) for a in target_addresses(image))


def test_line_table_lookup_semantics():
    a, b = SourceLoc("/src/a.c", 1), SourceLoc("/src/b.c", 2)
    # overlapping rows are clipped so the earlier-starting row keeps its bytes
    table = LineTable([(0x10, 0x20, a), (0x20, 0x28, b), (0x18, 0x30, b)])
    assert [(s, e) for s, e, _ in table] == [(0x10, 0x20), (0x20, 0x30)]
    assert table.resolve(0x0F) is None
    assert table.resolve(0x10) == a
    assert table.resolve(0x1F) == a
    assert table.resolve(0x20) == b
    assert table.resolve(0x30) is None
    assert resolve(None, 0x10) is None


@pytest.mark.parametrize("path, expected", [
    ("/usr/include/c++/13/bits/basic_string.h", True),
    ("/usr/lib/gcc/x86_64-linux-gnu/13/include/emmintrin.h", True),
    ("/home/dev/app/main.c", False),
    ("usr/include/stdio.h", False),
    ("/usr/src/../include/x.h", True),
    ("/usr/libexec/x.c", True),
    ("/usr/local/include/x.h", False),
])
def test_shared_library_origin(path, expected):
    assert is_shared_library_origin(SourceLoc(path, 1)) is expected
    assert is_shared_library_origin(None) is False
