"""Standalone BPF interpreter used as a conformance oracle.

Written independently of the package under test: it has its own decoder
and its own dispatch structure, and imports nothing from sbpf.  Helpers
are out of scope; programs that CALL anything are rejected.
"""

import struct

U64 = (1 << 64) - 1
U32 = (1 << 32) - 1
STACK = 512


def _sx64(v):
    return v - (1 << 64) if v & (1 << 63) else v


def _sx32(v):
    v &= U32
    return v - (1 << 32) if v & (1 << 31) else v


_ALU = {
    0x00: lambda a, b: a + b,
    0x10: lambda a, b: a - b,
    0x20: lambda a, b: a * b,
    0x30: lambda a, b: a // b if b else 0,
    0x40: lambda a, b: a | b,
    0x50: lambda a, b: a & b,
    0x90: lambda a, b: a % b if b else a,
    0xa0: lambda a, b: a ^ b,
    0xb0: lambda a, b: b,
}

_CMP = {
    0x10: lambda a, b: a == b,
    0x20: lambda a, b: a > b,
    0x30: lambda a, b: a >= b,
    0x40: lambda a, b: (a & b) != 0,
    0x50: lambda a, b: a != b,
    0x60: lambda a, b: _sx64(a) > _sx64(b),
    0x70: lambda a, b: _sx64(a) >= _sx64(b),
    0xa0: lambda a, b: a < b,
    0xb0: lambda a, b: a <= b,
    0xc0: lambda a, b: _sx64(a) < _sx64(b),
    0xd0: lambda a, b: _sx64(a) <= _sx64(b),
}

_WIDTH = {0x00: 4, 0x08: 2, 0x10: 1, 0x18: 8}


def run(code: bytes, r1: int = 0, r2: int = 0, max_steps: int = 2_000_000) -> int:
    """Execute raw instruction bytes and return r0 at exit."""
    assert len(code) % 8 == 0 and code
    slots = [struct.unpack_from("<BBhi", code, k * 8) for k in range(len(code) // 8)]
    reg = [0] * 11
    reg[1] = r1 & U64
    reg[2] = r2 & U64
    reg[10] = STACK
    mem = bytearray(STACK)
    pc = 0
    for _ in range(max_steps):
        op, regs, off, imm = slots[pc]
        dst, src = regs & 0xF, regs >> 4
        klass = op & 0x07

        if op == 0x18:  # wide immediate load
            hi = slots[pc + 1][3]
            reg[dst] = ((hi & U32) << 32) | (imm & U32)
            pc += 2
            continue

        if klass in (0x04, 0x07):
            is64 = klass == 0x07
            sel = op & 0xF0
            if sel == 0x80:  # neg
                val = -reg[dst]
                reg[dst] = val & U64 if is64 else val & U32
                pc += 1
                continue
            rhs = reg[src] if op & 0x08 else imm
            lhs = reg[dst]
            if not is64:
                lhs &= U32
                rhs &= U32
            else:
                rhs &= U64
            if sel in _ALU:
                out = _ALU[sel](lhs, rhs)
            elif sel == 0x60:
                out = lhs << (rhs & (63 if is64 else 31))
            elif sel == 0x70:
                out = lhs >> (rhs & (63 if is64 else 31))
            elif sel == 0xc0:
                signed = _sx64(lhs) if is64 else _sx32(lhs)
                out = signed >> (rhs & (63 if is64 else 31))
            else:
                raise AssertionError(f"alu op {op:#x}")
            reg[dst] = out & (U64 if is64 else U32)
            pc += 1
            continue

        if klass == 0x05:
            sel = op & 0xF0
            if sel == 0x90:
                return reg[0]
            if sel == 0x00:
                pc += 1 + off
                continue
            if sel == 0x80:
                raise AssertionError("reference interpreter has no helpers")
            rhs = reg[src] if op & 0x08 else imm & U64
            pc += 1 + (off if _CMP[sel](reg[dst], rhs) else 0)
            continue

        width = _WIDTH[op & 0x18]
        addr = (reg[src] if klass == 0x01 else reg[dst]) + off
        assert 0 <= addr and addr + width <= STACK
        if klass == 0x01:  # ldx
            reg[dst] = int.from_bytes(mem[addr:addr + width], "little")
        elif klass == 0x03:  # stx
            mem[addr:addr + width] = (reg[src] & ((1 << 8 * width) - 1)) \
                .to_bytes(width, "little")
        elif klass == 0x02:  # st
            mem[addr:addr + width] = (imm & ((1 << 8 * width) - 1)) \
                .to_bytes(width, "little")
        else:
            raise AssertionError(f"opcode {op:#x}")
        pc += 1
    raise AssertionError("step budget exhausted")
