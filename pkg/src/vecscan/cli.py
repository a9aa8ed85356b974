"""Command-line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional

from . import __version__
from .classify import ISA_MODES
from .corpus import DEFAULT_REQUEST_DELAY_MS
from .errors import NotABinary, ScanError
from .report import EXIT_FATAL, EXIT_OK, render_binary, render_summary, run_scan
from .scan import FORMATS, LAYOUTS, MNEMONIC_MODES, ScanConfig, scan_binary_detailed


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vecscan",
        description="Find x86-64 instructions that use vector registers in Debian packages.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings as they happen")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="scan a directory of .deb packages")
    scan.add_argument("corpus_root")
    scan.add_argument("--debug-source", help="directory or base URL holding -dbgsym .ddeb companions")
    scan.add_argument("--out", default="vecscan-out", help="output directory (default: %(default)s)")
    scan.add_argument("--format", choices=FORMATS, default="both")
    scan.add_argument("--isa-mode", choices=ISA_MODES, default="encoding",
                      help="bucket hits by encoding (legacy/VEX/EVEX) or by CPUID extension")
    scan.add_argument("--top-k", type=_positive, default=10)
    scan.add_argument("--jobs", type=_positive, default=1)
    scan.add_argument("--request-delay-ms", type=int, default=DEFAULT_REQUEST_DELAY_MS,
                      help="minimum gap between remote debug fetches")
    scan.add_argument("--layout", choices=LAYOUTS, default="packages",
                      help="'tree' scans an unpacked directory tree as a single package")
    scan.add_argument("--follow-symlinks", action="store_true",
                      help="with --layout tree, scan files reached through symlinks")
    scan.add_argument("--mnemonic-mode", choices=MNEMONIC_MODES, default="corpus",
                      help="mnemonic shares pooled corpus-wide or averaged per binary")
    scan.add_argument("-q", "--quiet", action="store_true", help="do not print the summary")

    one = sub.add_parser("scan-binary", help="scan a single binary file")
    one.add_argument("file")
    one.add_argument("--hits", action="store_true", help="list every target instruction")
    one.add_argument("--force", action="store_true", help="scan even if the file is not a binary file")
    one.add_argument("--isa-mode", choices=ISA_MODES, default="encoding")
    one.add_argument("--debug-file", help="separate debug file or .ddeb for lineage")

    sub.add_parser("version", help="print the version")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR,
                        format="%(levelname)s: %(message)s")

    if args.command == "version":
        print(f"vecscan {__version__}")
        return EXIT_OK

    if args.command == "scan-binary":
        companion = None
        if args.debug_file:
            with open(args.debug_file, "rb") as fh:
                companion = fh.read()
        try:
            result = scan_binary_detailed(args.file, force=args.force, isa_mode=args.isa_mode,
                                          debug_companion=companion, keep_hits=args.hits)
        except NotABinary as exc:
            print(f"error: {exc} (use --force to scan anyway)", file=sys.stderr)
            return EXIT_FATAL
        except (ScanError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FATAL
        print(render_binary(result.report, result.hits if args.hits else None))
        for warning in result.warnings:
            print(f"warning: {warning}", file=sys.stderr)
        return EXIT_OK

    try:
        config = ScanConfig(
            corpus_root=args.corpus_root,
            output_dir=args.out,
            debug_source=args.debug_source,
            format=args.format,
            isa_mode=args.isa_mode,
            top_k=args.top_k,
            jobs=args.jobs,
            request_delay_ms=args.request_delay_ms,
            layout=args.layout,
            mnemonic_mode=args.mnemonic_mode,
            follow_symlinks=args.follow_symlinks,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    run = run_scan(config)
    if run.error:
        print(f"error: {run.error}", file=sys.stderr)
    if run.outcome is not None and not args.quiet:
        print(render_summary(run.outcome.report, config.top_k, config.mnemonic_mode))
        if run.outcome.warnings:
            print(f"{len(run.outcome.warnings)} warnings, see {config.output_dir}/manifest.json")
    return run.exit_code


if __name__ == "__main__":
    sys.exit(main())
