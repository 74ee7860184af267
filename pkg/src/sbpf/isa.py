"""BPF instruction encoding, decoding, and structural validation.

Programs are flat little-endian streams of 64-bit slots:

    byte 0    opcode
    byte 1    registers, low nibble = dst, high nibble = src
    bytes 2-3 offset  (signed 16-bit; jump displacement in slots, or
                       memory displacement in bytes)
    bytes 4-7 imm     (signed 32-bit)

The supported set covers 64/32-bit arithmetic-logic, 64-bit conditional
and unconditional jumps, CALL/EXIT, byte/half/word/dword loads and stores
(stack-only by verifier policy), and the two-slot wide immediate load
(0x18).  The second slot of a wide load is stored as a continuation
pseudo-instruction with opcode 0x00 so that instruction indices always
equal slot indices; it is only legal directly after 0x18 and only in
canonical form (all fields zero except imm, which holds the high word).

Endianness-conversion and legacy packet opcodes are not part of the set,
nor are atomics or the 32-bit jump class.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import (
    EmptyProgram,
    InvalidLength,
    InvalidOpcode,
    InvalidRegister,
    TruncatedWideLoad,
    UnsupportedInstruction,
)

MAX_PROGRAM_LEN = 4096  # slots
NUM_REGISTERS = 11      # r0..r10; r10 is the read-only stack pointer

# Instruction classes (low 3 bits of the opcode).
CLS_LD = 0x00
CLS_LDX = 0x01
CLS_ST = 0x02
CLS_STX = 0x03
CLS_ALU32 = 0x04
CLS_JMP = 0x05
CLS_ALU64 = 0x07

# ALU operation selector (high 4 bits) and the register-source flag.
ALU_ADD = 0x00
ALU_SUB = 0x10
ALU_MUL = 0x20
ALU_DIV = 0x30
ALU_OR = 0x40
ALU_AND = 0x50
ALU_LSH = 0x60
ALU_RSH = 0x70
ALU_NEG = 0x80
ALU_MOD = 0x90
ALU_XOR = 0xa0
ALU_MOV = 0xb0
ALU_ARSH = 0xc0
SRC_REG = 0x08

# Jump operation selector.
JMP_JA = 0x00
JMP_JEQ = 0x10
JMP_JGT = 0x20
JMP_JGE = 0x30
JMP_JSET = 0x40
JMP_JNE = 0x50
JMP_JSGT = 0x60
JMP_JSGE = 0x70
JMP_CALL = 0x80
JMP_EXIT = 0x90
JMP_JLT = 0xa0
JMP_JLE = 0xb0
JMP_JSLT = 0xc0
JMP_JSLE = 0xd0

# Memory access width (bits 3-4) for load/store opcodes.
SIZE_W = 0x00   # 4 bytes
SIZE_H = 0x08   # 2 bytes
SIZE_B = 0x10   # 1 byte
SIZE_DW = 0x18  # 8 bytes
MODE_MEM = 0x60

OP_LDDW = 0x18       # wide immediate load, first slot
OP_WIDE_CONT = 0x00  # wide immediate load, continuation slot

SIZE_BYTES = {SIZE_W: 4, SIZE_H: 2, SIZE_B: 1, SIZE_DW: 8}

_ALU_OPS = (ALU_ADD, ALU_SUB, ALU_MUL, ALU_DIV, ALU_OR, ALU_AND, ALU_LSH,
            ALU_RSH, ALU_MOD, ALU_XOR, ALU_MOV, ALU_ARSH)
_JMP_COND_OPS = (JMP_JEQ, JMP_JGT, JMP_JGE, JMP_JSET, JMP_JNE, JMP_JSGT,
                 JMP_JSGE, JMP_JLT, JMP_JLE, JMP_JSLT, JMP_JSLE)


def _build_supported() -> dict[int, str]:
    ops: dict[int, str] = {}
    alu_names = {
        ALU_ADD: "add", ALU_SUB: "sub", ALU_MUL: "mul", ALU_DIV: "div",
        ALU_OR: "or", ALU_AND: "and", ALU_LSH: "lsh", ALU_RSH: "rsh",
        ALU_MOD: "mod", ALU_XOR: "xor", ALU_MOV: "mov", ALU_ARSH: "arsh",
    }
    for cls, tag in ((CLS_ALU64, "64"), (CLS_ALU32, "32")):
        for op, name in alu_names.items():
            ops[cls | op] = f"{name}{tag}_imm"
            ops[cls | op | SRC_REG] = f"{name}{tag}_reg"
        ops[cls | ALU_NEG] = f"neg{tag}"
    jmp_names = {
        JMP_JEQ: "jeq", JMP_JGT: "jgt", JMP_JGE: "jge", JMP_JSET: "jset",
        JMP_JNE: "jne", JMP_JSGT: "jsgt", JMP_JSGE: "jsge", JMP_JLT: "jlt",
        JMP_JLE: "jle", JMP_JSLT: "jslt", JMP_JSLE: "jsle",
    }
    ops[CLS_JMP | JMP_JA] = "ja"
    for op, name in jmp_names.items():
        ops[CLS_JMP | op] = f"{name}_imm"
        ops[CLS_JMP | op | SRC_REG] = f"{name}_reg"
    ops[CLS_JMP | JMP_CALL] = "call"
    ops[CLS_JMP | JMP_EXIT] = "exit"
    for size, suffix in ((SIZE_W, "w"), (SIZE_H, "h"), (SIZE_B, "b"), (SIZE_DW, "dw")):
        ops[CLS_LDX | MODE_MEM | size] = f"ldx{suffix}"
        ops[CLS_ST | MODE_MEM | size] = f"st{suffix}"
        ops[CLS_STX | MODE_MEM | size] = f"stx{suffix}"
    ops[OP_LDDW] = "lddw"
    return ops


SUPPORTED_OPCODES = _build_supported()

_SLOT = struct.Struct("<BBhi")


@dataclass(frozen=True)
class BpfInstruction:
    """One decoded 64-bit instruction slot."""

    opcode: int
    dst: int
    src: int
    offset: int
    imm: int

    @property
    def cls(self) -> int:
        return self.opcode & 0x07

    @property
    def is_wide_load(self) -> bool:
        return self.opcode == OP_LDDW

    @property
    def is_wide_continuation(self) -> bool:
        return self.opcode == OP_WIDE_CONT

    def mnemonic(self) -> str:
        if self.is_wide_continuation:
            return "lddw.cont"
        return SUPPORTED_OPCODES.get(self.opcode, f"op_0x{self.opcode:02x}")


@dataclass(frozen=True)
class BpfProgram:
    """A decoded program plus the byte stream it came from.

    ``instructions`` has one entry per slot; the slot after a wide load is
    the continuation pseudo-instruction.  Re-encoding always reproduces
    ``source_bytes``.
    """

    instructions: tuple[BpfInstruction, ...]
    source_bytes: bytes

    def __len__(self) -> int:
        return len(self.instructions)

    def wide_imm64(self, index: int) -> int:
        """Unsigned 64-bit immediate of the wide load starting at ``index``."""
        lo = self.instructions[index].imm & 0xFFFFFFFF
        hi = self.instructions[index + 1].imm & 0xFFFFFFFF
        return (hi << 32) | lo


def decode_program(data: bytes) -> BpfProgram:
    """Decode a little-endian instruction stream.

    Raises a typed ``DecodeError`` carrying the slot position for any
    malformed input; never aborts.
    """
    if len(data) == 0 or len(data) % 8 != 0:
        raise InvalidLength(f"program length {len(data)} is not a nonzero multiple of 8")
    n = len(data) // 8
    if n > MAX_PROGRAM_LEN:
        raise InvalidLength(f"program has {n} slots, limit is {MAX_PROGRAM_LEN}")

    out: list[BpfInstruction] = []
    continuation = False
    for i in range(n):
        opcode, regs, offset, imm = _SLOT.unpack_from(data, i * 8)
        dst = regs & 0x0F
        src = regs >> 4
        if continuation:
            if opcode != OP_WIDE_CONT:
                raise InvalidOpcode(i, opcode, "expected wide load continuation")
            if dst or src:
                raise InvalidRegister(i, max(dst, src))
            if offset:
                raise InvalidOpcode(i, opcode, "non-canonical wide load continuation")
            out.append(BpfInstruction(OP_WIDE_CONT, 0, 0, 0, imm))
            continuation = False
            continue
        if opcode not in SUPPORTED_OPCODES:
            raise InvalidOpcode(i, opcode)
        if dst > 10:
            raise InvalidRegister(i, dst)
        if src > 10:
            raise InvalidRegister(i, src)
        if opcode == OP_LDDW:
            if src != 0:
                raise InvalidOpcode(i, opcode, "wide load pseudo forms unsupported")
            if i == n - 1:
                raise TruncatedWideLoad(i)
            continuation = True
        out.append(BpfInstruction(opcode, dst, src, offset, imm))
    return BpfProgram(tuple(out), bytes(data))


def encode_program(program: BpfProgram | list[BpfInstruction] | tuple[BpfInstruction, ...]) -> bytes:
    """Emit the 8-bytes-per-slot little-endian stream for ``program``."""
    instructions = program.instructions if isinstance(program, BpfProgram) else tuple(program)
    if not instructions:
        raise EmptyProgram("program must contain at least one instruction")
    if len(instructions) > MAX_PROGRAM_LEN:
        raise UnsupportedInstruction(
            f"program has {len(instructions)} slots, limit is {MAX_PROGRAM_LEN}")

    parts = []
    expect_cont = False
    for i, ins in enumerate(instructions):
        if expect_cont != ins.is_wide_continuation:
            raise UnsupportedInstruction(
                f"slot {i}: misplaced wide load continuation")
        if not ins.is_wide_continuation and ins.opcode not in SUPPORTED_OPCODES:
            raise UnsupportedInstruction(f"slot {i}: opcode 0x{ins.opcode:02x}")
        if not 0 <= ins.dst <= 10 or not 0 <= ins.src <= 10:
            raise UnsupportedInstruction(f"slot {i}: register index out of range")
        expect_cont = ins.is_wide_load
        parts.append(_SLOT.pack(ins.opcode, (ins.src << 4) | ins.dst,
                                ins.offset, ins.imm))
    if expect_cont:
        raise UnsupportedInstruction("wide load at final slot has no continuation")
    return b"".join(parts)


def program_from_instructions(instructions: list[BpfInstruction]) -> BpfProgram:
    """Build a program whose source bytes are the canonical encoding."""
    raw = encode_program(instructions)
    return decode_program(raw)


# --- instruction factories ---------------------------------------------------
# Small constructors used by tests and by the built-in program templates.
# They build instruction objects directly; there is no text assembler.

def _s32(value: int) -> int:
    value &= 0xFFFFFFFF
    return value - 0x100000000 if value >= 0x80000000 else value


def alu64_imm(op: int, dst: int, imm: int) -> BpfInstruction:
    return BpfInstruction(CLS_ALU64 | op, dst, 0, 0, _s32(imm))


def alu64_reg(op: int, dst: int, src: int) -> BpfInstruction:
    return BpfInstruction(CLS_ALU64 | op | SRC_REG, dst, src, 0, 0)


def alu32_imm(op: int, dst: int, imm: int) -> BpfInstruction:
    return BpfInstruction(CLS_ALU32 | op, dst, 0, 0, _s32(imm))


def alu32_reg(op: int, dst: int, src: int) -> BpfInstruction:
    return BpfInstruction(CLS_ALU32 | op | SRC_REG, dst, src, 0, 0)


def mov64_imm(dst: int, imm: int) -> BpfInstruction:
    return alu64_imm(ALU_MOV, dst, imm)


def mov64_reg(dst: int, src: int) -> BpfInstruction:
    return alu64_reg(ALU_MOV, dst, src)


def neg64(dst: int) -> BpfInstruction:
    return BpfInstruction(CLS_ALU64 | ALU_NEG, dst, 0, 0, 0)


def lddw(dst: int, imm64: int) -> list[BpfInstruction]:
    imm64 &= 0xFFFFFFFFFFFFFFFF
    lo = _s32(imm64 & 0xFFFFFFFF)
    hi = _s32(imm64 >> 32)
    return [BpfInstruction(OP_LDDW, dst, 0, 0, lo),
            BpfInstruction(OP_WIDE_CONT, 0, 0, 0, hi)]


def jump(offset: int) -> BpfInstruction:
    return BpfInstruction(CLS_JMP | JMP_JA, 0, 0, offset, 0)


def jump_imm(op: int, dst: int, imm: int, offset: int) -> BpfInstruction:
    return BpfInstruction(CLS_JMP | op, dst, 0, offset, _s32(imm))


def jump_reg(op: int, dst: int, src: int, offset: int) -> BpfInstruction:
    return BpfInstruction(CLS_JMP | op | SRC_REG, dst, src, offset, 0)


def call(helper_id: int) -> BpfInstruction:
    return BpfInstruction(CLS_JMP | JMP_CALL, 0, 0, 0, _s32(helper_id))


def exit_() -> BpfInstruction:
    return BpfInstruction(CLS_JMP | JMP_EXIT, 0, 0, 0, 0)


def load_stack(size: int, dst: int, offset: int) -> BpfInstruction:
    """ldx: dst = *(size *)(r10 + offset)"""
    return BpfInstruction(CLS_LDX | MODE_MEM | size, dst, 10, offset, 0)


def store_stack_reg(size: int, offset: int, src: int) -> BpfInstruction:
    """stx: *(size *)(r10 + offset) = src"""
    return BpfInstruction(CLS_STX | MODE_MEM | size, 10, src, offset, 0)


def store_stack_imm(size: int, offset: int, imm: int) -> BpfInstruction:
    """st: *(size *)(r10 + offset) = imm"""
    return BpfInstruction(CLS_ST | MODE_MEM | size, 10, 0, offset, _s32(imm))
