"""Builders for test fixtures: compiled programs, static archives, split
debug files and .deb/.ddeb packages."""

from __future__ import annotations

import io
import os
import shutil
import subprocess
import tarfile
from pathlib import Path

CC = shutil.which("gcc") or shutil.which("cc")

FLOAT_SNIPPET = """\
int main(void) {
    float pi = 3.14;
    float x = pi * 2.0;
    return (int)x;
}
"""

# main() sits on line 4; the vector work comes from emmintrin.h helpers,
# which gcc inlines at -O0 with line rows pointing into the header
DEBUG_PROGRAM = """\
#include <emmintrin.h>
#include <stdio.h>

int main(int argc, char **argv) {
    __m128d a = _mm_set1_pd((double)argc);
    __m128d b = _mm_add_pd(a, a);
    double out[2];
    _mm_storeu_pd(out, b);
    printf("%f\\n", out[0] + argc);
    return 0;
}
"""

SHARED_LIB = """\
double scale(double x) { return x * 1.5; }
long count(const long *v, long n) { long s = 0; for (long i = 0; i < n; i++) s += v[i]; return s; }
"""

# no libc, no vector code: three integer instructions and a syscall
INTEGER_ONLY_ASM = """\
    .text
    .globl _start
_start:
    mov $60, %eax
    xor %edi, %edi
    add $1, %rdi
    syscall
"""

# loops gcc vectorizes at -O3; built for several -m targets to cover
# legacy SSE, VEX and EVEX encodings
VECTOR_KERNELS = """\
#include <string.h>
void saxpy(float *restrict y, const float *restrict x, float a, int n) {
    for (int i = 0; i < n; i++) y[i] += a * x[i];
}
double dot(const double *a, const double *b, int n) {
    double s = 0; for (int i = 0; i < n; i++) s += a[i] * b[i]; return s;
}
void widen(int *restrict out, const short *restrict in, int n) {
    for (int i = 0; i < n; i++) out[i] = in[i] * 3;
}
int count_eq(const unsigned char *p, unsigned char c, int n) {
    int k = 0; for (int i = 0; i < n; i++) k += p[i] == c; return k;
}
struct big { char bytes[4096]; };
void copy_big(struct big *d, const struct big *s) { *d = *s; }
void clear(char *p, unsigned long n) { memset(p, 0, n); }
int main(void) { return 0; }
"""

ARCHIVE_MEMBERS = {
    "vec.c": "float vscale(float x) { return x * 3.0f; }\n",
    "a_member_with_a_long_name.c": "double dadd(double a, double b) { return a + b; }\n",
    "plain.c": "int iadd(int a, int b) { return a + b; }\n",
}


def run(*cmd, cwd=None):
    subprocess.run([str(c) for c in cmd], check=True, cwd=cwd, capture_output=True)


def compile_c(workdir: Path, name: str, source: str, *flags: str) -> Path:
    src = workdir / f"{name}.c"
    src.write_text(source)
    out = workdir / name
    run(CC, *flags, "-o", out, src)
    return out


def assemble_freestanding(workdir: Path, name: str, source: str) -> Path:
    src = workdir / f"{name}.s"
    src.write_text(source)
    out = workdir / name
    run(CC, "-nostdlib", "-static", "-o", out, src)
    return out


def build_static_archive(workdir: Path, name: str = "libmix.a", flags=("-O2",)) -> Path:
    objs = []
    for fname, text in ARCHIVE_MEMBERS.items():
        src = workdir / fname
        src.write_text(text)
        obj = workdir / (fname[:-2] + ".o")
        run(CC, *flags, "-c", "-o", obj, src)
        objs.append(obj.name)
    out = workdir / name
    if out.exists():
        out.unlink()
    run("ar", "rcs", out.name, *objs, cwd=workdir)
    return out


def split_debug(binary: Path) -> Path:
    """Move debug info into ``<binary>.debug`` and leave a debug link."""
    dbg = binary.with_name(binary.name + ".debug")
    run("objcopy", "--only-keep-debug", binary, dbg)
    run("objcopy", "--strip-debug", f"--add-gnu-debuglink={dbg}", binary)
    return dbg


def build_deb(workdir: Path, package: str, version: str, files: dict, compressor: str = "xz",
              suffix: str = ".deb") -> Path:
    """Build a package with dpkg-deb. *files* maps install path -> (content, mode)."""
    root = workdir / f"{package}-root"
    if root.exists():
        shutil.rmtree(root)
    (root / "DEBIAN").mkdir(parents=True)
    (root / "DEBIAN" / "control").write_text(
        f"Package: {package}\nVersion: {version}\nArchitecture: amd64\n"
        f"Maintainer: Test <test@example.org>\nDescription: fixture {package}\n"
    )
    for path, (content, mode) in files.items():
        target = root / path.lstrip("/")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content)
        os.chmod(target, mode)
    out = workdir / f"{package}_{version}_amd64{suffix}"
    run("dpkg-deb", f"-Z{compressor}", "--root-owner-group", "--build", root, out)
    return out


def build_id_of(binary_bytes: bytes) -> bytes:
    from vecscan.binobj import _section_headers, read_build_id

    return read_build_id(binary_bytes, _section_headers(binary_bytes))


def tar_bytes(members: list, compression: str = "") -> bytes:
    """A tarball from (name, content or None for a directory, mode) triples."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode=f"w:{compression}" if compression else "w") as tar:
        for name, content, mode in members:
            info = tarfile.TarInfo(name)
            info.mode = mode
            if content is None:
                info.type = tarfile.DIRTYPE
                tar.addfile(info)
            else:
                info.size = len(content)
                tar.addfile(info, io.BytesIO(content))
    return buf.getvalue()


def ar_bytes(members: list) -> bytes:
    """A GNU-style ar archive from (name, data) pairs; names must fit 16 bytes."""
    out = bytearray(b"!<arch>\n")
    for name, data in members:
        header = (
            f"{name:<16}" f"{0:<12}" f"{0:<6}" f"{0:<6}" f"{100644:<8}" f"{len(data):<10}"
        ).encode() + b"`\n"
        assert len(header) == 60
        out += header + data
        if len(data) % 2:
            out += b"\n"
    return bytes(out)


def handmade_deb(data_members: list, control: str = "Package: handmade\nVersion: 1\n",
                 data_name: str = "data.tar.gz", data_compression: str = "gz") -> bytes:
    control_tar = tar_bytes([("./control", control.encode(), 0o644)], "gz")
    data_tar = tar_bytes(data_members, data_compression)
    return ar_bytes([
        ("debian-binary", b"2.0\n"),
        ("control.tar.gz", control_tar),
        (data_name, data_tar),
    ])
