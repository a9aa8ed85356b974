"""Exception hierarchy shared by the scanner modules."""

from __future__ import annotations


class ScanError(Exception):
    """Base class for every error raised by vecscan."""


class MalformedArchive(ScanError):
    """Not an ar container, or a required member is missing or unusable."""


class UnsafePath(MalformedArchive):
    """A tarball entry would escape the extraction root."""


class UnsupportedCompression(ScanError):
    pass


class TruncatedMember(MalformedArchive):
    pass


class MalformedStanza(ScanError):
    pass


class MalformedElf(ScanError):
    """Content is not a usable ELF64 little-endian image."""


class TruncatedElf(MalformedElf):
    pass


class NonX86(ScanError):
    def __init__(self, machine: int, message: str | None = None):
        self.machine = machine
        super().__init__(message or f"ELF machine {machine} is not x86-64")


class MalformedDebugInfo(ScanError):
    pass


class OverlapDetected(ScanError):
    pass


class EmptyCorpus(ScanError):
    pass


class UnknownPackage(ScanError, KeyError):
    pass


class NotABinary(ScanError):
    pass
