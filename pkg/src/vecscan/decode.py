"""Linear-sweep x86-64 decoding into a normalized instruction model.

Byte-level decoding is delegated to iced-x86; everything the rest of the
package sees is the :class:`Instruction` model defined here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional, Union

import iced_x86
from iced_x86 import Decoder, DecoderOptions, EncodingKind, InstructionInfoFactory, OpKind

BANKS = ("gpr", "x87", "mmx", "xmm", "ymm", "zmm", "mask", "other")
VECTOR_BANKS = frozenset({"xmm", "ymm", "zmm"})
_WIDTH = {"xmm": 1, "ymm": 2, "zmm": 3}

PREFIX_NAMES = frozenset({"rep", "repne", "operand_size", "address_size", "lock", "segment"})
_LEGACY_PREFIX_BYTES = frozenset({0xF0, 0xF2, 0xF3, 0x2E, 0x36, 0x3E, 0x26, 0x64, 0x65, 0x66, 0x67})
MAX_INSTRUCTION_LENGTH = 15
# decode MPX bnd* forms instead of reserved NOPs, as binutils does
DECODER_OPTIONS = DecoderOptions.MPX


class RegisterRef(NamedTuple):
    bank: str
    index: int

    def __str__(self) -> str:
        if self.bank in ("xmm", "ymm", "zmm", "mmx"):
            return f"{'mm' if self.bank == 'mmx' else self.bank}{self.index}"
        if self.bank == "mask":
            return f"k{self.index}"
        if self.bank == "x87":
            return f"st{self.index}"
        return f"{self.bank}{self.index}"

    @classmethod
    def parse(cls, text: str) -> "RegisterRef":
        text = text.strip().lower()
        for prefix, bank in (("xmm", "xmm"), ("ymm", "ymm"), ("zmm", "zmm"), ("mm", "mmx"),
                             ("st", "x87"), ("k", "mask")):
            if text.startswith(prefix) and text[len(prefix):].isdigit():
                return cls(bank, int(text[len(prefix):]))
        raise ValueError(f"cannot parse register {text!r}")


@dataclass(frozen=True)
class Instruction:
    address: int
    length: int
    mnemonic: str
    prefixes: frozenset
    encoding: str
    explicit_regs: tuple
    implicit_regs: tuple
    has_memory_operand: bool
    is_string_op: bool = False
    extensions: tuple = ()
    raw: bytes = b""

    @property
    def end(self) -> int:
        return self.address + self.length


class InvalidByte(NamedTuple):
    address: int
    byte: int

    @property
    def length(self) -> int:
        return 1


DecodeEvent = Union[Instruction, InvalidByte]


# --------------------------------------------------------------------------
# iced-x86 lookup tables

def _enum_names(module) -> dict[int, str]:
    names = {}
    for attr in dir(module):
        if attr.isupper() or (attr[:1].isupper() and "_" in attr):
            value = getattr(module, attr)
            if isinstance(value, int):
                names.setdefault(value, attr)
    return names


_GPR64 = ["RAX", "RCX", "RDX", "RBX", "RSP", "RBP", "RSI", "RDI"] + [f"R{i}" for i in range(8, 16)]
_GPR32 = ["EAX", "ECX", "EDX", "EBX", "ESP", "EBP", "ESI", "EDI"] + [f"R{i}D" for i in range(8, 16)]
_GPR16 = ["AX", "CX", "DX", "BX", "SP", "BP", "SI", "DI"] + [f"R{i}W" for i in range(8, 16)]
_GPR8 = ["AL", "CL", "DL", "BL", "SPL", "BPL", "SIL", "DIL"] + [f"R{i}L" for i in range(8, 16)]


def _register_table() -> dict[int, RegisterRef]:
    table: dict[int, RegisterRef] = {}
    reg = iced_x86.Register
    for group in (_GPR64, _GPR32, _GPR16, _GPR8):
        for idx, name in enumerate(group):
            table[getattr(reg, name)] = RegisterRef("gpr", idx)
    for idx, name in enumerate(("AH", "CH", "DH", "BH")):
        table[getattr(reg, name)] = RegisterRef("gpr", idx)
    for i in range(32):
        table[getattr(reg, f"XMM{i}")] = RegisterRef("xmm", i)
        table[getattr(reg, f"YMM{i}")] = RegisterRef("ymm", i)
        table[getattr(reg, f"ZMM{i}")] = RegisterRef("zmm", i)
    for i in range(8):
        table[getattr(reg, f"K{i}")] = RegisterRef("mask", i)
        table[getattr(reg, f"MM{i}")] = RegisterRef("mmx", i)
        table[getattr(reg, f"ST{i}")] = RegisterRef("x87", i)
    for value, name in _enum_names(reg).items():
        if value not in table and value != reg.NONE:
            table[value] = RegisterRef("other", 0)
    return table


_REGISTERS = _register_table()
_MNEMONICS = {v: n.lower() for v, n in _enum_names(iced_x86.Mnemonic).items()}
_CPUID = {v: n.lower() for v, n in _enum_names(iced_x86.CpuidFeature).items()}
_ENCODINGS = {
    EncodingKind.LEGACY: "legacy",
    EncodingKind.VEX: "vex",
    EncodingKind.EVEX: "evex",
    EncodingKind.XOP: "vex",      # AMD's VEX-like escape
    EncodingKind.D3NOW: "legacy",
    EncodingKind.MVEX: "evex",
}
_ENC_VEX = EncodingKind.VEX
_ENC_XOP = EncodingKind.XOP
_REG_NONE = iced_x86.Register.NONE
_OK_REGISTER = OpKind.REGISTER
_OK_MEMORY = OpKind.MEMORY
_MEMORY_KINDS = frozenset(
    getattr(OpKind, n) for n in dir(OpKind) if n.startswith("MEMORY") and n[:1].isupper()
)
_MOVS_CODES = frozenset(
    getattr(iced_x86.Code, n)
    for n in ("MOVSB_M8_M8", "MOVSW_M16_M16", "MOVSD_M32_M32", "MOVSQ_M64_M64")
)
_VECTOR_OPERAND_KINDS = frozenset(
    getattr(iced_x86.OpCodeOperandKind, n)
    for n in dir(iced_x86.OpCodeOperandKind)
    if n[:1].isupper() and any(t in n for t in ("XMM", "YMM", "ZMM", "VSIB"))
)
_MANDATORY_66 = iced_x86.MandatoryPrefix.P66


def _legacy_prefix_bytes(raw: bytes) -> bytes:
    i = 0
    while i < len(raw) and raw[i] in _LEGACY_PREFIX_BYTES:
        i += 1
    return raw[:i]


def _widest_vectors(regs: list[RegisterRef]) -> list[RegisterRef]:
    """Collapse xmmN/ymmN/zmmN seen together into the widest view."""
    widest: dict[int, str] = {}
    for r in regs:
        if r.bank in _WIDTH and _WIDTH[r.bank] > _WIDTH.get(widest.get(r.index, ""), 0):
            widest[r.index] = r.bank
    out, seen = [], set()
    for r in regs:
        if r.bank in _WIDTH:
            r = RegisterRef(widest[r.index], r.index)
        if r not in seen:
            seen.add(r)
            out.append(r)
    return out


class _Normalizer:
    """Converts iced instructions into :class:`Instruction` values."""

    def __init__(self):
        self.info_factory = InstructionInfoFactory()
        # iced Code -> True when instances may be target instructions
        self.candidate_codes: dict[int, bool] = {}
        # iced Code -> facts shared by every instance of that opcode form
        self.static: dict[int, tuple] = {}

    def _static(self, ins: iced_x86.Instruction) -> tuple:
        facts = self.static.get(ins.code)
        if facts is None:
            facts = (
                _MNEMONICS.get(ins.mnemonic, "unknown"),
                _ENCODINGS.get(ins.encoding, "legacy"),
                ins.encoding == _ENC_VEX or ins.encoding == _ENC_XOP,
                ins.op_code().mandatory_prefix == _MANDATORY_66,
                ins.is_string_instruction,
                tuple(_CPUID.get(f, str(f)) for f in ins.cpuid_features()),
            )
            self.static[ins.code] = facts
        return facts

    def build(self, ins: iced_x86.Instruction, raw: bytes) -> Instruction:
        explicit: list[RegisterRef] = []
        has_mem = False
        for i in range(ins.op_count):
            kind = ins.op_kind(i)
            if kind == _OK_REGISTER:
                explicit.append(_REGISTERS[ins.op_register(i)])
            elif kind == _OK_MEMORY:
                has_mem = True
                for reg in (ins.memory_base, ins.memory_index):
                    if reg != _REG_NONE:
                        explicit.append(_REGISTERS[reg])
            elif kind in _MEMORY_KINDS:
                has_mem = True
        if ins.op_mask != _REG_NONE:
            explicit.append(_REGISTERS[ins.op_mask])
        explicit_set = set(explicit)

        implicit: list[RegisterRef] = []
        for used in self.info_factory.info(ins).used_registers():
            ref = _REGISTERS.get(used.register)
            if ref is not None and ref not in explicit_set:
                implicit.append(ref)
        mnemonic, encoding, vex_like, mandatory_66, is_string, extensions = self._static(ins)
        implicit = _widest_vectors(implicit)
        if vex_like:
            # VEX cannot name zmm; iced reports the zero-extended upper half
            implicit = _widest_vectors(
                [RegisterRef("ymm", r.index) if r.bank == "zmm" else r for r in implicit]
            )
        explicit_vec = {r.index for r in explicit_set if r.bank in VECTOR_BANKS}
        # a wider view of an explicit vector register is the same register
        implicit = [
            r for r in implicit
            if r not in explicit_set and not (r.bank in VECTOR_BANKS and r.index in explicit_vec)
        ]

        prefixes = set()
        if ins.has_rep_prefix:
            prefixes.add("rep")
        if ins.has_repne_prefix:
            prefixes.add("repne")
        if ins.has_lock_prefix:
            prefixes.add("lock")
        if ins.has_segment_prefix:
            prefixes.add("segment")
        legacy = _legacy_prefix_bytes(raw)
        if 0x67 in legacy:
            prefixes.add("address_size")
        if 0x66 in legacy and not mandatory_66:
            prefixes.add("operand_size")

        return Instruction(
            address=ins.ip,
            length=ins.len,
            mnemonic=mnemonic,
            prefixes=frozenset(prefixes),
            encoding=encoding,
            explicit_regs=tuple(dict.fromkeys(explicit)),
            implicit_regs=tuple(implicit),
            has_memory_operand=has_mem,
            is_string_op=is_string,
            extensions=extensions,
            raw=raw,
        )

    def is_candidate(self, ins: iced_x86.Instruction) -> bool:
        code = ins.code
        flag = self.candidate_codes.get(code)
        if flag is None:
            op_code = ins.op_code()
            flag = code in _MOVS_CODES or any(
                op_code.op_kind(i) in _VECTOR_OPERAND_KINDS for i in range(op_code.op_count)
            )
            if not flag:
                # implicit vector operands are fixed by the opcode
                flag = any(
                    _REGISTERS.get(u.register, RegisterRef("other", 0)).bank in VECTOR_BANKS
                    for u in self.info_factory.info(ins).used_registers()
                )
            self.candidate_codes[code] = flag
        return flag


_normalizer = _Normalizer()


def _sweep(code: bytes, base: int):
    """Yield (iced instruction or None, offset) tiling *code*."""
    decoder = Decoder(64, code, DECODER_OPTIONS, ip=base)
    for ins in decoder:
        pos = ins.ip - base
        if ins.is_invalid:
            yield None, pos
            # resynchronize one byte further on
            decoder.position = pos + 1
            decoder.ip = base + pos + 1
        else:
            yield ins, pos


def decode_linear(code: bytes, base: int = 0) -> Iterator[DecodeEvent]:
    """Decode *code* sequentially, emitting InvalidByte and advancing one byte
    wherever decoding fails."""
    norm = _normalizer
    for ins, pos in _sweep(code, base):
        if ins is None:
            yield InvalidByte(base + pos, code[pos])
        else:
            yield norm.build(ins, code[pos:pos + ins.len])


class SweepResult(NamedTuple):
    n_instructions: int
    n_invalid: int
    candidates: list


def decode_candidates(code: bytes, base: int = 0) -> SweepResult:
    """Linear sweep that only materializes instructions which may be targets.

    Every instruction not returned is guaranteed to reference no vector
    register and not to be a movs string instruction.
    """
    norm = _normalizer
    known = norm.candidate_codes
    n_ins = n_bad = 0
    out = []
    # same walk as _sweep, inlined: this loop runs once per instruction
    decoder = Decoder(64, code, DECODER_OPTIONS, ip=base)
    for ins in decoder:
        if ins.is_invalid:
            n_bad += 1
            pos = ins.ip - base + 1
            decoder.position = pos
            decoder.ip = base + pos
            continue
        n_ins += 1
        flag = known.get(ins.code)
        if flag is None:
            flag = norm.is_candidate(ins)
        if flag:
            pos = ins.ip - base
            out.append(norm.build(ins, code[pos:pos + ins.len]))
    return SweepResult(n_ins, n_bad, out)


def decode_one(code: bytes, address: int = 0) -> Optional[Instruction]:
    """Decode a single instruction at the start of *code*."""
    for event in decode_linear(code[:MAX_INSTRUCTION_LENGTH], address):
        return event if isinstance(event, Instruction) else None
    return None


def vector_registers_of(inst: Instruction) -> frozenset:
    """The xmm/ymm/zmm registers an instruction references, explicitly or not."""
    return frozenset(
        r for r in inst.explicit_regs + inst.implicit_regs if r.bank in VECTOR_BANKS
    )
