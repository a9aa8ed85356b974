"""Hypothesis strategies for hits and reports."""

from __future__ import annotations

from hypothesis import strategies as st

from vecscan.classify import EXPLICIT_VECTOR, IMPLICIT_REP_MOVS, TargetHit
from vecscan.decode import RegisterRef
from vecscan.lineage import SourceLoc, is_shared_library_origin
from vecscan.metrics import BinaryReport, CorpusReport

MNEMONICS = ["movaps", "movups", "movsd", "pxor", "mulsd", "vmovdqu", "addss", "movq"]
STRING_MOVES = ["movsb", "movsw", "movsd", "movsq"]
PATHS = [
    "/usr/include/x86_64-linux-gnu/bits/string_fortified.h",
    "/usr/include/c++/13/bits/basic_string.h",
    "/usr/lib/gcc/x86_64-linux-gnu/13/include/emmintrin.h",
    "/build/src/main.c",
    "/build/src/util.c",
]
FUNCTIONS = ["main", "parse", "copy", "<unattributed>"]

locations = st.one_of(st.none(), st.builds(SourceLoc, st.sampled_from(PATHS), st.integers(1, 500)))


@st.composite
def target_hits(draw):
    if draw(st.integers(0, 5)) == 0:
        return TargetHit(draw(st.integers(0, 1 << 20)), IMPLICIT_REP_MOVS, "other",
                         draw(st.sampled_from(STRING_MOVES)), frozenset(), draw(locations))
    regs = draw(st.frozensets(st.builds(RegisterRef, st.sampled_from(["xmm", "ymm", "zmm"]),
                                        st.integers(0, 31)), min_size=1, max_size=3))
    return TargetHit(draw(st.integers(0, 1 << 20)), EXPLICIT_VECTOR, draw(st.sampled_from(["sse", "avx"])),
                     draw(st.sampled_from(MNEMONICS)), regs, draw(locations))


@st.composite
def binary_reports(draw, package=None, path=None):
    hits = draw(st.lists(target_hits(), max_size=25))
    functions = {h.address: draw(st.sampled_from(FUNCTIONS)) for h in hits}
    return BinaryReport.from_hits(
        path or draw(st.sampled_from(["/usr/bin/a", "/usr/bin/b", "/usr/lib/libc.so.6", "/usr/lib/x.a"])),
        package or draw(st.sampled_from(["pkg-a", "pkg-b", "pkg-c"])),
        hits,
        n_instructions=len(hits) + draw(st.integers(0, 1000)),
        function_of=lambda a: None if functions[a] == "<unattributed>" else functions[a],
        is_library=is_shared_library_origin,
        kind="executable",
    )


@st.composite
def disjoint_reports(draw, count=3):
    """*count* CorpusReports over disjoint (package, path) keys."""
    keys = draw(st.lists(
        st.tuples(st.sampled_from(["p1", "p2", "p3", "p4", "p5"]), st.sampled_from([f"/bin/f{i}" for i in range(10)])),
        unique=True, max_size=15))
    extra_packages = draw(st.lists(st.sampled_from(["s1", "s2", "p1", "p2"]), max_size=3))
    reports = [CorpusReport() for _ in range(count)]
    for pkg, path in keys:
        reports[draw(st.integers(0, count - 1))].add_binary(draw(binary_reports(package=pkg, path=path)))
    for name in extra_packages:
        reports[draw(st.integers(0, count - 1))].add_package(name)
    return reports
