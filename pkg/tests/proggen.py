"""Weighted random program generation for the soundness check.

Every emitted field stays within what the decoder could produce
(registers 0..10, 16-bit offsets, 32-bit immediates), but the programs
themselves range from well formed to deliberately broken.  The mix is
tilted so a healthy share survives verification: reads usually pick a
register the straight-line prefix already wrote, jumps usually land
forward and in range, stack accesses usually stay inside the frame.
The untilted remainder keeps the rejection paths exercised.
"""

from __future__ import annotations

import random

from sbpf import isa
from sbpf.isa import BpfInstruction, BpfProgram

# ids the soundness harness registers; implementations must be total so
# any accepted program runs to EXIT on arbitrary register values
HARNESS_HELPER_IDS = (1, 2, 3)

_BIN_ALU = (isa.ALU_ADD, isa.ALU_SUB, isa.ALU_MUL, isa.ALU_DIV, isa.ALU_OR,
            isa.ALU_AND, isa.ALU_LSH, isa.ALU_RSH, isa.ALU_MOD, isa.ALU_XOR,
            isa.ALU_ARSH)
_COND_JMP = (isa.JMP_JEQ, isa.JMP_JGT, isa.JMP_JGE, isa.JMP_JSET,
             isa.JMP_JNE, isa.JMP_JSGT, isa.JMP_JSGE, isa.JMP_JLT,
             isa.JMP_JLE, isa.JMP_JSLT, isa.JMP_JSLE)
_SIZES = (isa.SIZE_B, isa.SIZE_H, isa.SIZE_W, isa.SIZE_DW)


def _imm(rng: random.Random) -> int:
    roll = rng.random()
    if roll < 0.5:
        return rng.randint(-16, 16)
    if roll < 0.8:
        return rng.choice((1, 2, 4, 8, 31, 32, 63, 64, 255, -1, -8))
    return rng.randint(-(1 << 31), (1 << 31) - 1)


def _read_reg(rng: random.Random, written: list[int]) -> int:
    if written and rng.random() < 0.85:
        return rng.choice(written)
    return rng.randrange(11)


def _rw_reg(rng: random.Random, written: list[int]) -> int:
    """Destination of an op that reads dst before writing it."""
    general = [r for r in written if r != 10]
    if general and rng.random() < 0.85:
        return rng.choice(general)
    return rng.randrange(11 if rng.random() < 0.1 else 10)


def _write_reg(rng: random.Random) -> int:
    return rng.randrange(10) if rng.random() < 0.97 else 10


def _stack_offset(rng: random.Random, width: int) -> int:
    if rng.random() < 0.88:
        return -rng.randint(width, 512)
    return rng.choice((0, 1, width, -513, -600, rng.randint(-1024, 1023)))


def random_program(rng: random.Random, max_len: int = 8) -> BpfProgram:
    length = rng.randint(1, max_len)
    body: list[BpfInstruction] = []
    written = [1, 2, 10]

    def note_write(reg: int) -> None:
        if reg < 10 and reg not in written:
            written.append(reg)

    while len(body) < length:
        here = len(body)
        slots_left = length - here
        if slots_left == 1 and rng.random() < 0.85:
            body.append(isa.exit_())
            break
        kind = rng.choices(
            ("alu_imm", "alu_reg", "mov_imm", "mov_reg", "neg", "lddw",
             "ldx", "stx", "st", "ja", "cond", "call", "exit"),
            weights=(16, 10, 14, 6, 3, 5 if slots_left >= 2 else 0,
                     7, 6, 4, 3 if slots_left >= 2 else 0,
                     6 if slots_left >= 2 else 0, 7, 6))[0]
        if kind == "alu_imm":
            op = rng.choice(_BIN_ALU)
            dst = _rw_reg(rng, written)
            ins = (isa.alu64_imm if rng.random() < 0.7 else isa.alu32_imm)(
                op, dst, _imm(rng))
            body.append(ins)
            note_write(dst)
        elif kind == "alu_reg":
            op = rng.choice(_BIN_ALU)
            dst = _rw_reg(rng, written)
            src = _read_reg(rng, written)
            ins = (isa.alu64_reg if rng.random() < 0.7 else isa.alu32_reg)(
                op, dst, src)
            body.append(ins)
            note_write(dst)
        elif kind == "mov_imm":
            dst = _write_reg(rng)
            body.append(isa.mov64_imm(dst, _imm(rng)))
            note_write(dst)
        elif kind == "mov_reg":
            dst = _write_reg(rng)
            body.append(isa.mov64_reg(dst, _read_reg(rng, written)))
            note_write(dst)
        elif kind == "neg":
            dst = _rw_reg(rng, written)
            body.append(isa.neg64(dst))
            note_write(dst)
        elif kind == "lddw":
            dst = _write_reg(rng)
            body.extend(isa.lddw(dst, rng.getrandbits(64)))
            note_write(dst)
        elif kind == "ldx":
            size = rng.choice(_SIZES)
            dst = _write_reg(rng)
            base = 10 if rng.random() < 0.85 else _read_reg(rng, written)
            body.append(BpfInstruction(
                isa.CLS_LDX | isa.MODE_MEM | size, dst, base,
                _stack_offset(rng, isa.SIZE_BYTES[size]), 0))
            note_write(dst)
        elif kind == "stx":
            size = rng.choice(_SIZES)
            base = 10 if rng.random() < 0.85 else _read_reg(rng, written)
            body.append(BpfInstruction(
                isa.CLS_STX | isa.MODE_MEM | size, base,
                _read_reg(rng, written),
                _stack_offset(rng, isa.SIZE_BYTES[size]), 0))
        elif kind == "st":
            size = rng.choice(_SIZES)
            base = 10 if rng.random() < 0.85 else _read_reg(rng, written)
            body.append(BpfInstruction(
                isa.CLS_ST | isa.MODE_MEM | size, base, 0,
                _stack_offset(rng, isa.SIZE_BYTES[size]), _imm(rng)))
        elif kind == "ja":
            body.append(isa.jump(_jump_offset(rng, slots_left)))
        elif kind == "cond":
            op = rng.choice(_COND_JMP)
            offset = _jump_offset(rng, slots_left)
            if rng.random() < 0.5:
                body.append(isa.jump_imm(op, _read_reg(rng, written),
                                         _imm(rng), offset))
            else:
                body.append(isa.jump_reg(op, _read_reg(rng, written),
                                         _read_reg(rng, written), offset))
        elif kind == "call":
            if rng.random() < 0.85:
                helper_id = rng.choice(HARNESS_HELPER_IDS)
            else:
                helper_id = rng.randint(0, 64)
            body.append(isa.call(helper_id))
            for reg in range(6):
                note_write(reg)
        else:
            body.append(isa.exit_())
            break
    return isa.program_from_instructions(body)


def _jump_offset(rng: random.Random, slots_left: int) -> int:
    if rng.random() < 0.88:
        return rng.randint(0, max(0, slots_left - 2))
    return rng.choice((-2, -1, slots_left, slots_left + 3))
