"""Target-instruction classification.

An instruction is a target when it references an xmm/ymm/zmm register
(explicit_vector) or when it is a rep-prefixed movs string move, which uses
vector registers internally (implicit_rep_movs).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .decode import Instruction, vector_registers_of

EXPLICIT_VECTOR = "explicit_vector"
IMPLICIT_REP_MOVS = "implicit_rep_movs"
MODES = (EXPLICIT_VECTOR, IMPLICIT_REP_MOVS)
ISA_CLASSES = ("sse", "avx", "other")
ISA_MODES = ("encoding", "extension")

STRING_MOVE_MNEMONICS = frozenset({"movs", "movsb", "movsw", "movsd", "movsq"})

# --isa-mode extension: bucket by the CPUID feature the decoder reports
_SSE_FEATURES = frozenset({
    "sse", "sse2", "sse3", "ssse3", "sse4_1", "sse4_2", "sse4a",
    "aes", "pclmulqdq", "sha", "gfni",
})
_AVX_PREFIXES = ("avx",)
_AVX_FEATURES = frozenset({"fma", "fma4", "f16c", "xop", "vaes", "vpclmulqdq"})


@dataclass(frozen=True)
class TargetHit:
    address: int
    mode: str
    isa_class: str
    mnemonic: str
    registers: frozenset
    lineage: Optional[object] = None

    def __post_init__(self):
        if self.mode == IMPLICIT_REP_MOVS and (self.isa_class != "other" or self.registers):
            raise ValueError("implicit_rep_movs hits are class 'other' with no registers")
        if self.mode == EXPLICIT_VECTOR and not self.registers:
            raise ValueError("explicit_vector hits must name a vector register")

    def with_lineage(self, loc) -> "TargetHit":
        return replace(self, lineage=loc)


def is_rep_string_move(inst: Instruction) -> bool:
    return (
        "rep" in inst.prefixes
        and inst.is_string_op
        and inst.mnemonic in STRING_MOVE_MNEMONICS
    )


def is_repne_string_move(inst: Instruction) -> bool:
    """repne movs: hardware repeats it like rep, but only rep is counted."""
    return (
        "repne" in inst.prefixes
        and inst.is_string_op
        and inst.mnemonic in STRING_MOVE_MNEMONICS
    )


def normalize_mnemonic(inst: Instruction) -> str:
    return inst.mnemonic.lower()


def isa_class_of(inst: Instruction, mode: str, isa_mode: str = "encoding") -> str:
    if mode == IMPLICIT_REP_MOVS:
        return "other"
    if isa_mode == "extension":
        features = inst.extensions
        if any(f.startswith(_AVX_PREFIXES) or f in _AVX_FEATURES for f in features):
            return "avx"
        if any(f in _SSE_FEATURES for f in features):
            return "sse"
        return "other"
    return "sse" if inst.encoding == "legacy" else "avx"


def classify(inst: Instruction, isa_mode: str = "encoding") -> Optional[TargetHit]:
    regs = vector_registers_of(inst)
    if regs:
        mode = EXPLICIT_VECTOR
    elif is_rep_string_move(inst):
        mode = IMPLICIT_REP_MOVS
    else:
        return None
    return TargetHit(
        address=inst.address,
        mode=mode,
        isa_class=isa_class_of(inst, mode, isa_mode),
        mnemonic=normalize_mnemonic(inst),
        registers=regs,
    )
