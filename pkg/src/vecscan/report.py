"""Dataset construction and serialization.

Every dataset is a table with fixed columns. JSON output is one document
per dataset (``{"dataset", "columns", "rows"}``); CSV output is the same
table with a header line. Outputs carry no timestamps and are sorted, so a
rescan of the same corpus reproduces them byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from typing import Optional

from . import __version__
from .errors import EmptyCorpus, ScanError
from .metrics import (
    CorpusReport,
    binary_target_ratio,
    isa_ratio_series,
    library_share,
    lineage_series,
    mnemonic_table,
    package_binary_ratio,
    package_detail,
)
from .scan import ScanConfig, ScanOutcome, collect

DATASETS = (
    "table2_package_ratio",
    "fig4_binary_ratio",
    "fig5_isa_series",
    "table3_mnemonics",
    "fig6_lineage_series",
    "fig7_library_share",
    "table4_package_detail",
)

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_WARNINGS = 2


def _ratio_or_none(fn, report):
    try:
        return fn(report)
    except EmptyCorpus:
        return None


def build_datasets(r: CorpusReport, top_k: int = 10, mnemonic_mode: str = "corpus") -> dict:
    """Map dataset name -> (columns, rows)."""
    with_bins = len({pkg for pkg, _ in r.binaries} & r.packages)
    with_hits = sum(1 for b in r.binaries.values() if b.n_target > 0)
    out = {
        "table2_package_ratio": (
            ["n_packages", "n_packages_with_binaries", "ratio"],
            [[r.n_packages, with_bins, _ratio_or_none(package_binary_ratio, r)]],
        ),
        "fig4_binary_ratio": (
            ["n_binaries", "n_binaries_with_targets", "ratio"],
            [[r.n_binaries, with_hits, _ratio_or_none(binary_target_ratio, r)]],
        ),
        "fig5_isa_series": (
            ["rank", "binary_path", "package", "ratio_sse", "ratio_avx", "ratio_other"],
            [[i + 1, *row] for i, row in enumerate(isa_ratio_series(r, with_keys=True))],
        ),
        "table3_mnemonics": (
            ["rank", "mnemonic", "percent"],
            [[i + 1, m, p] for i, (m, p) in enumerate(
                mnemonic_table(r, top_k, per_binary_mean=mnemonic_mode == "binary-mean"))],
        ),
        "fig6_lineage_series": (
            ["rank", "binary_path", "package", "ratio_library", "lineage_known", "lineage_library"],
            [[i + 1, *row] for i, row in enumerate(lineage_series(r, with_keys=True))],
        ),
        "fig7_library_share": (
            ["rank", "library_path", "percent"],
            [[i + 1, path, p] for i, (path, p) in enumerate(library_share(r, top_k))],
        ),
    }
    detail_cols = ["package", "n_binaries", "n_binaries_with_hits", "N_T", "N_F", "F_MAX_kind", "F_MAX"]
    detail_rows = []
    for name in sorted(r.packages):
        d = package_detail(r, name).to_dict()
        detail_rows.append([d[c] for c in detail_cols])
    out["table4_package_detail"] = (detail_cols, detail_rows)
    return out


BINARY_COLUMNS = [
    "package", "binary_path", "kind", "status", "n_instructions", "n_invalid",
    "n_target", "n_repne_movs", "class_counts", "mnemonic_counts", "lineage_known",
    "lineage_library", "library_path_counts", "function_counts",
]


def binary_rows(r: CorpusReport) -> list[list]:
    rows = []
    for b in r.sorted_binaries():
        d = b.to_dict()
        rows.append([d[c] for c in BINARY_COLUMNS])
    return rows


def _json_document(name: str, columns, rows) -> str:
    doc = {"dataset": name, "columns": list(columns), "rows": rows}
    return json.dumps(doc, sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    if isinstance(value, float):
        return repr(value)
    return value


def _csv_document(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    return buf.getvalue()


def manifest(config: ScanConfig, outcome: ScanOutcome, exit_code: int) -> dict:
    settings = {
        "corpus_root": config.corpus_root,
        "debug_source": config.debug_source,
        "format": config.format,
        "isa_mode": config.isa_mode,
        "top_k": config.top_k,
        "jobs": config.jobs,
        "request_delay_ms": config.request_delay_ms,
        "layout": config.layout,
        "mnemonic_mode": config.mnemonic_mode,
        "follow_symlinks": config.follow_symlinks,
    }
    packages = [
        {
            "name": meta.name,
            "version": meta.version,
            "repository_component": meta.repository_component,
            "filename": meta.filename,
            "sha256": meta.sha256,
            "n_binaries": n,
        }
        for meta, n in sorted(outcome.packages, key=lambda t: (t[0].name, t[0].version))
    ]
    r = outcome.report
    return {
        "tool": "vecscan",
        "tool_version": __version__,
        "config": settings,
        "corpus_sha256": outcome.corpus_hash,
        "n_packages": r.n_packages,
        "n_binaries": r.n_binaries,
        "n_instructions": sum(b.n_instructions for b in r.binaries.values()),
        "n_target": sum(b.n_target for b in r.binaries.values()),
        "n_repne_movs": sum(b.n_repne_movs for b in r.binaries.values()),
        "status_counts": _status_counts(r),
        "packages": packages,
        "warnings": list(outcome.warnings),
        "exit_code": exit_code,
    }


def _status_counts(r: CorpusReport) -> dict:
    counts: dict = {}
    for b in r.binaries.values():
        counts[b.status] = counts.get(b.status, 0) + 1
    return counts


def write_outputs(config: ScanConfig, outcome: ScanOutcome, exit_code: int) -> list[str]:
    os.makedirs(config.output_dir, exist_ok=True)
    tables = build_datasets(outcome.report, config.top_k, config.mnemonic_mode)
    tables["binaries"] = (BINARY_COLUMNS, binary_rows(outcome.report))
    written = []
    formats = ("json", "csv") if config.format == "both" else (config.format,)

    def put(filename: str, text: str):
        path = os.path.join(config.output_dir, filename)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        written.append(path)

    for name, (columns, rows) in tables.items():
        if "json" in formats:
            put(f"{name}.json", _json_document(name, columns, rows))
        if "csv" in formats:
            put(f"{name}.csv", _csv_document(columns, rows))
    put("manifest.json", json.dumps(manifest(config, outcome, exit_code),
                                    sort_keys=True, indent=1, ensure_ascii=False) + "\n")
    return written


class ScanRun:
    def __init__(self, exit_code: int, outcome: Optional[ScanOutcome], error: Optional[str] = None):
        self.exit_code = exit_code
        self.outcome = outcome
        self.error = error

    @property
    def report(self) -> Optional[CorpusReport]:
        return self.outcome.report if self.outcome is not None else None


def run_scan(config: ScanConfig) -> ScanRun:
    """Scan, then write every dataset and the manifest.

    Exit code 0 is a clean run, 2 a run with per-file warnings, 1 a fatal
    error (empty corpus or unwritable output).
    """
    try:
        outcome = collect(config)
    except ScanError as exc:
        return ScanRun(EXIT_FATAL, None, str(exc))
    exit_code = EXIT_WARNINGS if outcome.warnings else EXIT_OK
    try:
        write_outputs(config, outcome, exit_code)
    except OSError as exc:
        return ScanRun(EXIT_FATAL, outcome, f"cannot write output: {exc}")
    return ScanRun(exit_code, outcome)


# --------------------------------------------------------------------------
# Human-readable rendering

def sig(x: Optional[float], digits: int = 2) -> str:
    """Round to *digits* significant figures: 12.3 -> '12', 8.34 -> '8.3'."""
    if x is None:
        return "n/a"
    if x == 0 or not math.isfinite(x):
        return "0" if x == 0 else str(x)
    decimals = max(0, digits - 1 - math.floor(math.log10(abs(x))))
    rounded = round(x, decimals)
    # rounding can carry into a new leading digit (9.96 -> 10.0)
    if rounded and decimals and math.floor(math.log10(abs(rounded))) > math.floor(math.log10(abs(x))):
        decimals -= 1
    return f"{rounded:.{decimals}f}"


def render_summary(r: CorpusReport, top_k: int = 10, mnemonic_mode: str = "corpus") -> str:
    tables = build_datasets(r, top_k, mnemonic_mode)
    lines = []
    t2 = tables["table2_package_ratio"][1][0]
    f4 = tables["fig4_binary_ratio"][1][0]
    pct = lambda v: "n/a" if v is None else sig(v * 100) + "%"
    lines.append(f"packages: {t2[0]}, with binaries: {t2[1]} ({pct(t2[2])})")
    lines.append(f"binaries: {f4[0]}, with target instructions: {f4[1]} ({pct(f4[2])})")
    mn = tables["table3_mnemonics"][1]
    if mn:
        lines.append("top mnemonics: " + ", ".join(f"{m} ({sig(p)})" for _, m, p in mn))
    libs = tables["fig7_library_share"][1]
    if libs:
        lines.append("top library origins:")
        lines.extend(f"  {path} ({sig(p)}%)" for _, path, p in libs)
    return "\n".join(lines)


def render_binary(report, hits=None) -> str:
    lines = [
        f"{report.binary_path}",
        f"  kind: {report.kind}  status: {report.status}",
        f"  instructions: {report.n_instructions}  invalid bytes: {report.n_invalid}",
        f"  target instructions: {report.n_target}",
    ]
    if report.n_target:
        shares = "  ".join(f"{c}: {report.class_counts[c]} ({sig(report.class_counts[c] / report.n_target * 100)}%)"
                           for c in ("sse", "avx", "other"))
        lines.append(f"  by class: {shares}")
        ranked = sorted(report.mnemonic_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        lines.append("  mnemonics: " + ", ".join(f"{m} {n}" for m, n in ranked[:10]))
    if report.lineage_known:
        lines.append(f"  known lineage: {report.lineage_known}  library origin: {report.lineage_library}")
    if report.n_repne_movs:
        lines.append(f"  repne movs (not counted): {report.n_repne_movs}")
    for hit in hits or ():
        regs = ",".join(sorted(str(r) for r in hit.registers)) or "-"
        where = str(hit.lineage) if hit.lineage is not None else "-"
        lines.append(f"  {hit.address:#x}  {hit.mnemonic:<12} {hit.mode:<18} {hit.isa_class:<5} {regs}  {where}")
    return "\n".join(lines)
