"""Per-binary and per-package aggregation of target hits.

A CorpusReport is nothing more than the set of package names plus one
BinaryReport per (package, binary path); every dataset is derived from that,
so merging two disjoint reports and deriving afterwards gives the same
numbers as a single pass over the union.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .binobj import UNATTRIBUTED
from .errors import EmptyCorpus, OverlapDetected, UnknownPackage

ISA_CLASSES = ("sse", "avx", "other")

# BinaryReport.status values
OK = "ok"
PARSE_ERROR = "parse_error"
FOREIGN_ARCH = "foreign_arch"


@dataclass
class BinaryReport:
    binary_path: str
    package: str
    n_instructions: int = 0
    n_target: int = 0
    class_counts: dict = field(default_factory=lambda: dict.fromkeys(ISA_CLASSES, 0))
    mnemonic_counts: dict = field(default_factory=dict)
    lineage_known: int = 0
    lineage_library: int = 0
    library_path_counts: dict = field(default_factory=dict)
    function_counts: dict = field(default_factory=dict)
    kind: Optional[str] = None
    status: str = OK
    n_invalid: int = 0
    n_repne_movs: int = 0

    def __post_init__(self):
        self.class_counts = {c: int(self.class_counts.get(c, 0)) for c in ISA_CLASSES}
        self.check()

    def check(self) -> None:
        if sum(self.class_counts.values()) != self.n_target:
            raise ValueError(f"{self.binary_path}: class counts do not sum to n_target")
        if sum(self.mnemonic_counts.values()) != self.n_target:
            raise ValueError(f"{self.binary_path}: mnemonic counts do not sum to n_target")
        if not 0 <= self.lineage_library <= self.lineage_known <= self.n_target:
            raise ValueError(f"{self.binary_path}: lineage counts out of order")
        if sum(self.library_path_counts.values()) != self.lineage_library:
            raise ValueError(f"{self.binary_path}: library path counts do not sum to lineage_library")
        if sum(self.function_counts.values()) != self.n_target:
            raise ValueError(f"{self.binary_path}: function counts do not sum to n_target")

    @property
    def key(self) -> tuple[str, str]:
        return (self.package, self.binary_path)

    @classmethod
    def from_hits(
        cls,
        binary_path: str,
        package: str,
        hits: Iterable,
        n_instructions: int = 0,
        function_of=None,
        is_library=None,
        **extra,
    ) -> "BinaryReport":
        """Tally TargetHits. *function_of* maps an address to a function
        name or None; *is_library* decides library origin of a SourceLoc."""
        classes: Counter = Counter()
        mnemonics: Counter = Counter()
        functions: Counter = Counter()
        lib_paths: Counter = Counter()
        known = 0
        n = 0
        for hit in hits:
            n += 1
            classes[hit.isa_class] += 1
            mnemonics[hit.mnemonic] += 1
            name = function_of(hit.address) if function_of is not None else None
            functions[name or UNATTRIBUTED] += 1
            if hit.lineage is not None:
                known += 1
                if is_library is not None and is_library(hit.lineage):
                    lib_paths[hit.lineage.path] += 1
        return cls(
            binary_path=binary_path,
            package=package,
            n_instructions=n_instructions,
            n_target=n,
            class_counts=dict(classes),
            mnemonic_counts=dict(mnemonics),
            lineage_known=known,
            lineage_library=sum(lib_paths.values()),
            library_path_counts=dict(lib_paths),
            function_counts=dict(functions),
            **extra,
        )

    def to_dict(self) -> dict:
        return {
            "binary_path": self.binary_path,
            "package": self.package,
            "kind": self.kind,
            "status": self.status,
            "n_instructions": self.n_instructions,
            "n_invalid": self.n_invalid,
            "n_target": self.n_target,
            "n_repne_movs": self.n_repne_movs,
            "class_counts": dict(self.class_counts),
            "mnemonic_counts": dict(self.mnemonic_counts),
            "lineage_known": self.lineage_known,
            "lineage_library": self.lineage_library,
            "library_path_counts": dict(self.library_path_counts),
            "function_counts": dict(self.function_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinaryReport":
        return cls(**d)


def combine_reports(binary_path: str, package: str, parts: Iterable[BinaryReport], **extra) -> BinaryReport:
    """Sum several reports (e.g. the members of a static archive) into one."""
    parts = list(parts)

    def total(attr):
        c: Counter = Counter()
        for p in parts:
            c.update(getattr(p, attr))
        return dict(c)

    return BinaryReport(
        binary_path=binary_path,
        package=package,
        n_instructions=sum(p.n_instructions for p in parts),
        n_target=sum(p.n_target for p in parts),
        class_counts=total("class_counts"),
        mnemonic_counts={k: v for k, v in total("mnemonic_counts").items() if v},
        lineage_known=sum(p.lineage_known for p in parts),
        lineage_library=sum(p.lineage_library for p in parts),
        library_path_counts={k: v for k, v in total("library_path_counts").items() if v},
        function_counts={k: v for k, v in total("function_counts").items() if v},
        n_invalid=sum(p.n_invalid for p in parts),
        n_repne_movs=sum(p.n_repne_movs for p in parts),
        **extra,
    )


class FMax:
    """The F_MAX column: no hits, a tie between functions, or one name."""

    NONE = "none"
    MULTIPLE = "multiple"
    NAME = "name"

    __slots__ = ("kind", "name")

    def __init__(self, kind: str, name: Optional[str] = None):
        if kind not in (self.NONE, self.MULTIPLE, self.NAME):
            raise ValueError(kind)
        if (kind == self.NAME) != (name is not None):
            raise ValueError("F_MAX carries a name exactly when kind is 'name'")
        self.kind = kind
        self.name = name

    def __eq__(self, other):
        return isinstance(other, FMax) and (self.kind, self.name) == (other.kind, other.name)

    def __hash__(self):
        return hash((self.kind, self.name))

    def __repr__(self):
        return f"FMax({self.kind!r}, {self.name!r})" if self.name else f"FMax({self.kind!r})"

    def __str__(self):
        if self.kind == self.NONE:
            return "N/A"
        if self.kind == self.MULTIPLE:
            return "M/F"
        return self.name


@dataclass(frozen=True)
class PackageReport:
    package: str
    n_binaries: int
    n_binaries_with_hits: int
    N_T: int
    N_F: int
    F_MAX: FMax

    def __post_init__(self):
        if self.N_F > self.n_binaries:
            raise ValueError("N_F exceeds n_binaries")
        if (self.N_T == 0) != (self.F_MAX.kind == FMax.NONE):
            raise ValueError("F_MAX is none exactly when N_T is 0")

    def to_dict(self) -> dict:
        return {
            "package": self.package,
            "n_binaries": self.n_binaries,
            "n_binaries_with_hits": self.n_binaries_with_hits,
            "N_T": self.N_T,
            "N_F": self.N_F,
            "F_MAX_kind": self.F_MAX.kind,
            "F_MAX": self.F_MAX.name,
        }


@dataclass
class CorpusReport:
    packages: set = field(default_factory=set)
    binaries: dict = field(default_factory=dict)

    def add_package(self, name: str) -> None:
        self.packages.add(name)

    def add_binary(self, report: BinaryReport) -> None:
        if report.key in self.binaries:
            raise OverlapDetected(f"duplicate binary {report.key}")
        self.packages.add(report.package)
        self.binaries[report.key] = report

    def sorted_binaries(self) -> list[BinaryReport]:
        return [self.binaries[k] for k in sorted(self.binaries)]

    @property
    def n_packages(self) -> int:
        return len(self.packages)

    @property
    def n_binaries(self) -> int:
        return len(self.binaries)


def merge(a: CorpusReport, b: CorpusReport) -> CorpusReport:
    overlap = a.binaries.keys() & b.binaries.keys()
    if overlap:
        raise OverlapDetected(f"binaries present in both reports: {sorted(overlap)[:5]}")
    return CorpusReport(packages=a.packages | b.packages, binaries={**a.binaries, **b.binaries})


# --------------------------------------------------------------------------
# Derived datasets

def package_binary_ratio(r: CorpusReport) -> float:
    if not r.packages:
        raise EmptyCorpus("no packages")
    with_binaries = {pkg for pkg, _ in r.binaries}
    return len(with_binaries & r.packages) / len(r.packages)


def binary_target_ratio(r: CorpusReport) -> float:
    if not r.binaries:
        raise EmptyCorpus("no binaries")
    hit = sum(1 for b in r.binaries.values() if b.n_target > 0)
    return hit / len(r.binaries)


def isa_ratios(b: BinaryReport) -> tuple[float, float, float]:
    n = b.n_target
    return tuple(b.class_counts[c] / n for c in ISA_CLASSES)


def isa_ratio_series(r: CorpusReport, with_keys: bool = False) -> list:
    """Per-binary (sse, avx, other) shares, ratio_sse descending."""
    rows = []
    for b in r.binaries.values():
        if b.n_target > 0:
            rows.append((isa_ratios(b), b.binary_path, b.package))
    rows.sort(key=lambda t: (-t[0][0], t[1], t[2]))
    if with_keys:
        return [(path, pkg) + ratios for ratios, path, pkg in rows]
    return [ratios for ratios, _, _ in rows]


def _top_k(counts: dict, k: int, total: float) -> list[tuple[str, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if total <= 0:
        return []
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(key, value / total * 100.0) for key, value in ranked[:k] if value > 0]


def mnemonic_table(r: CorpusReport, k: int = 10, per_binary_mean: bool = False) -> list[tuple[str, float]]:
    """Top-k mnemonics as percent of all target hits.

    With *per_binary_mean* each binary's mnemonic shares are averaged over
    the binaries that have hits, instead of pooling counts corpus-wide.
    """
    if not per_binary_mean:
        counts: Counter = Counter()
        for b in r.binaries.values():
            counts.update(b.mnemonic_counts)
        return _top_k(counts, k, sum(counts.values()))
    shares: Counter = Counter()
    n = 0
    for b in r.binaries.values():
        if b.n_target:
            n += 1
            for m, c in b.mnemonic_counts.items():
                shares[m] += c / b.n_target
    return _top_k(shares, k, n)


def library_origin_ratio(b: BinaryReport) -> Optional[float]:
    if b.lineage_known == 0:
        return None
    return b.lineage_library / b.lineage_known


def lineage_series(r: CorpusReport, with_keys: bool = False) -> list:
    """Per-binary library-origin ratio over known-lineage hits, descending."""
    rows = []
    for b in r.binaries.values():
        ratio = library_origin_ratio(b)
        if ratio is not None:
            rows.append((ratio, b.binary_path, b.package, b.lineage_known, b.lineage_library))
    rows.sort(key=lambda t: (-t[0], t[1], t[2]))
    if with_keys:
        return [(path, pkg, ratio, known, lib) for ratio, path, pkg, known, lib in rows]
    return [t[0] for t in rows]


def library_share(r: CorpusReport, k: int = 10) -> list[tuple[str, float]]:
    counts: Counter = Counter()
    for b in r.binaries.values():
        counts.update(b.library_path_counts)
    return _top_k(counts, k, sum(counts.values()))


def package_detail(r: CorpusReport, package: str) -> PackageReport:
    if package not in r.packages:
        raise UnknownPackage(package)
    members = [b for (pkg, _), b in r.binaries.items() if pkg == package]
    n_t = sum(b.n_target for b in members)
    n_f = sum(1 for b in members if b.n_target > 0)
    # a function is identified by (binary, name); hits outside every
    # function span share one package-wide pool
    per_function: Counter = Counter()
    for b in members:
        for name, count in b.function_counts.items():
            key = (None, UNATTRIBUTED) if name == UNATTRIBUTED else (b.binary_path, name)
            per_function[key] += count
    if n_t == 0:
        f_max = FMax(FMax.NONE)
    else:
        top = max(per_function.values())
        leaders = [key for key, count in per_function.items() if count == top]
        f_max = FMax(FMax.MULTIPLE) if len(leaders) > 1 else FMax(FMax.NAME, leaders[0][1])
    return PackageReport(
        package=package,
        n_binaries=len(members),
        n_binaries_with_hits=n_f,
        N_T=n_t,
        N_F=n_f,
        F_MAX=f_max,
    )
