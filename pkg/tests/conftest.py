import os
import shutil
import sys
from pathlib import Path

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import fixtures  # noqa: E402

needs_cc = pytest.mark.skipif(fixtures.CC is None, reason="no C compiler")
needs_dpkg = pytest.mark.skipif(shutil.which("dpkg-deb") is None, reason="dpkg-deb not installed")


@pytest.fixture(scope="session")
def build_dir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("build")


@pytest.fixture(scope="session")
def float_binary(build_dir):
    return fixtures.compile_c(build_dir, "float_snippet", fixtures.FLOAT_SNIPPET, "-O0")


@pytest.fixture(scope="session")
def debug_binary(build_dir):
    return fixtures.compile_c(build_dir, "debugprog", fixtures.DEBUG_PROGRAM, "-O0", "-g")


@pytest.fixture(scope="session")
def split_binary(build_dir):
    """(stripped binary, separate debug file) pair linked by build-id and debug link."""
    work = build_dir / "split"
    work.mkdir()
    binary = fixtures.compile_c(work, "splitprog", fixtures.DEBUG_PROGRAM, "-O0", "-g",
                                "-Wl,--build-id=sha1")
    dbg = fixtures.split_debug(binary)
    return binary, dbg


@pytest.fixture(scope="session")
def pie_binary(build_dir):
    return fixtures.compile_c(build_dir, "pieprog", fixtures.FLOAT_SNIPPET, "-O0", "-fPIE", "-pie")


@pytest.fixture(scope="session")
def nopie_binary(build_dir):
    return fixtures.compile_c(build_dir, "nopieprog", fixtures.FLOAT_SNIPPET, "-O0", "-no-pie")


@pytest.fixture(scope="session")
def shared_lib(build_dir):
    return fixtures.compile_c(build_dir, "libscale.so.1.2", fixtures.SHARED_LIB,
                              "-O2", "-shared", "-fPIC")


@pytest.fixture(scope="session")
def integer_binary(build_dir):
    return fixtures.assemble_freestanding(build_dir, "intonly", fixtures.INTEGER_ONLY_ASM)


@pytest.fixture(scope="session")
def static_archive(build_dir):
    work = build_dir / "archive"
    work.mkdir()
    return fixtures.build_static_archive(work)


SCRIPT = b"#!/bin/sh\nexec true\n"


@pytest.fixture(scope="session")
def corpus_dirs(build_dir, float_binary, shared_lib, static_archive, split_binary, integer_binary):
    """A three-package corpus plus a directory of debug companions.

    vechello: PIE, shared library, static archive, script, integer-only program
    scripts:  no binary files
    dbgapp:   stripped program whose line info ships in a .ddeb
    """
    if shutil.which("dpkg-deb") is None:
        pytest.skip("dpkg-deb not installed")
    work = build_dir / "corpus-build"
    work.mkdir()
    root = build_dir / "corpus"
    root.mkdir()
    debug = build_dir / "debug"
    debug.mkdir()
    stripped, dbg = split_binary
    debs = [
        fixtures.build_deb(work, "vechello", "1.0-1", {
            "/usr/bin/floatprog": (float_binary.read_bytes(), 0o755),
            "/usr/bin/intonly": (integer_binary.read_bytes(), 0o755),
            "/usr/lib/x86_64-linux-gnu/libscale.so.1.2": (shared_lib.read_bytes(), 0o644),
            "/usr/lib/x86_64-linux-gnu/libmix.a": (static_archive.read_bytes(), 0o644),
            "/usr/bin/helper": (SCRIPT, 0o755),
        }),
        fixtures.build_deb(work, "scripts", "2.0", {
            "/usr/bin/run.py": (b"#!/usr/bin/python3\nprint(1)\n", 0o755),
            "/usr/share/doc/scripts/README": (b"docs\n", 0o644),
        }, compressor="gzip"),
        fixtures.build_deb(work, "dbgapp", "0.3", {
            "/usr/bin/splitprog": (stripped.read_bytes(), 0o755),
        }, compressor="zstd"),
    ]
    for deb in debs:
        shutil.copy(deb, root / deb.name)
    from vecscan.lineage import build_id_path

    fixtures.build_deb(debug, "dbgapp-dbgsym", "0.3", {
        build_id_path(fixtures.build_id_of(stripped.read_bytes())): (dbg.read_bytes(), 0o644),
    }, suffix=".ddeb")
    shutil.rmtree(debug / "dbgapp-dbgsym-root")
    return root, debug


# -- acceptance reporting -------------------------------------------------

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    state = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    previous = _criteria.get(number)
    # a failure sticks; among passes, prefer the test that recorded figures
    if previous is None or (previous[0] == "PASS" and (state != "PASS" or not previous[2])):
        _criteria[number] = (state, item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        state, name, detail = _criteria[number]
        line = f"criterion {number:>2}: {state}  {name}"
        terminalreporter.write_line(f"{line}  ({detail})" if detail else line)
