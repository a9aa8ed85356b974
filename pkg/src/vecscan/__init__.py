"""Detect, classify and attribute x86-64 vector-register instructions in
Debian package corpora."""

__version__ = "0.1.0"
