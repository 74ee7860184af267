"""Interpreter for verified programs plus the standard helper library.

Semantics follow the 64-bit BPF convention: registers are unsigned
64-bit with two's-complement wraparound, 32-bit ALU forms zero-extend
their result, division by zero yields 0, modulo by zero leaves the
dividend, and shift amounts are masked to the operand width.  CALL
passes r1..r5, returns in r0, and zeroes r1..r5 afterwards so helper
calls never leak stale values back into the program.

Direct loads and stores touch only the 512-byte stack; r10 holds the
stack-top token (the stack size itself, not a host address), so slot
``offset`` lives at byte ``STACK_SIZE + offset``.  Everything else goes
through helpers, which bounds-check their arguments at runtime because
argument values are data-dependent and invisible to the verifier.

Helper stack arguments use base-relative byte indices in [0, 512): index
0 is the deepest slot, equal to instruction offset -512.
"""

from __future__ import annotations

import inspect
from typing import Any, Callable

from . import isa
from .errors import (
    DuplicateHelper,
    HelperFault,
    ReservedId,
    SbpfError,
    StepLimitExceeded,
    UnknownHelper,
    VmFault,
)
from .verifier import STACK_SIZE, VerifiedProgram

DEFAULT_STEP_LIMIT = 1_000_000

MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1

_MASK64 = MASK64
_ENTRY_REGS = (0,) * 10 + (STACK_SIZE,)
_CLOBBERED = (0, 0, 0, 0, 0)

# Standard helper IDs (the calling library).
HID_SHM_READ_U64 = 1
HID_SHM_WRITE_U64 = 2
HID_SHM_READ_VEC = 3
HID_SHM_WRITE_VEC = 4
HID_RING_PUSH = 5
HID_PSS_PREDICT = 6
HID_PSS_UPDATE = 7
HID_ARGS_WRITE = 8
HID_RETVAL_READ = 9

STANDARD_HELPER_IDS = frozenset(range(1, 10))


def _u64(x: int) -> int:
    return x & MASK64


def _s64(x: int) -> int:
    x &= MASK64
    return x - (1 << 64) if x >= (1 << 63) else x


def _u32(x: int) -> int:
    return x & MASK32


def _s32(x: int) -> int:
    x &= MASK32
    return x - (1 << 32) if x >= (1 << 31) else x


class HelperTable:
    """Map from helper ID to (name, arity, implementation).

    Implementations are called as ``fn(vm, *args)`` with ``arity``
    arguments taken from r1..r5.  ID 0 is reserved.
    """

    def __init__(self) -> None:
        self.entries: dict[int, tuple[str, int, Callable[..., Any]]] = {}

    def register(self, helper_id: int, fn: Callable[..., Any],
                 name: str | None = None, arity: int | None = None) -> "HelperTable":
        if helper_id == 0:
            raise ReservedId("helper ID 0 is reserved")
        if helper_id in self.entries:
            raise DuplicateHelper(f"helper {helper_id} already registered")
        if arity is None:
            arity = len(inspect.signature(fn).parameters) - 1
        if not 0 <= arity <= 5:
            raise ValueError(f"helper arity {arity} outside 0..5")
        self.entries[helper_id] = (name or fn.__name__, arity, fn)
        return self

    def ids(self) -> frozenset[int]:
        return frozenset(self.entries)

    def __contains__(self, helper_id: int) -> bool:
        return helper_id in self.entries


class VmInstance:
    """One single-threaded execution engine.

    The stack persists across ``execute`` calls on purpose: callers
    preload argument bytes with ``load_stack``, run a program that hands
    them to a helper, and read results back with ``read_stack``.
    """

    def __init__(self, helpers: HelperTable | None = None,
                 step_limit: int = DEFAULT_STEP_LIMIT,
                 segment_view: Any = None) -> None:
        self.helpers = helpers if helpers is not None else HelperTable()
        self.step_limit = step_limit
        self.segment_view = segment_view
        self.stack = bytearray(STACK_SIZE)
        self.registers = [0] * 11

    def load_stack(self, data: bytes, at: int = 0) -> None:
        if at < 0 or at + len(data) > STACK_SIZE:
            raise VmFault(f"stack preload [{at}, {at + len(data)}) outside frame")
        self.stack[at:at + len(data)] = data

    def read_stack(self, length: int, at: int = 0) -> bytes:
        if at < 0 or length < 0 or at + length > STACK_SIZE:
            raise VmFault(f"stack read [{at}, {at + length}) outside frame")
        return bytes(self.stack[at:at + length])

    def stack_fetch(self, offset: int, length: int) -> bytes:
        """Helper-facing read; offset and length are unsigned."""
        if offset + length > STACK_SIZE:
            raise VmFault(f"helper stack read [{offset}, {offset + length}) "
                          f"outside frame")
        return bytes(self.stack[offset:offset + length])

    def stack_store(self, offset: int, data: bytes) -> None:
        if offset + len(data) > STACK_SIZE:
            raise VmFault(f"helper stack write [{offset}, {offset + len(data)}) "
                          f"outside frame")
        self.stack[offset:offset + len(data)] = data

    def execute(self, program: VerifiedProgram,
                context: tuple[int, int] = (0, 0),
                segment_view: Any = ...,
                entry_regs: dict[int, int] | None = None) -> int:
        """Run to EXIT and return r0.

        ``entry_regs`` overrides individual entry registers (r1..r5);
        used by randomized soundness checks to model arbitrary input.
        """
        if not isinstance(program, VerifiedProgram):
            raise TypeError("execute requires a VerifiedProgram witness")
        if segment_view is not ...:
            self.segment_view = segment_view
        regs = self.registers
        regs[:] = _ENTRY_REGS
        regs[1] = context[0] & _MASK64
        regs[2] = context[1] & _MASK64
        if entry_regs:
            for reg, value in entry_regs.items():
                if not 1 <= reg <= 5:
                    raise VmFault(f"entry override for r{reg} not allowed")
                regs[reg] = _u64(value)
        if program.fast_helper is not None and self.step_limit >= 2:
            self._dispatch(program.fast_helper)
            return regs[0]
        return self._run(program.program)

    def _run(self, program: isa.BpfProgram) -> int:
        regs = self.registers
        stack = self.stack
        instructions = program.instructions
        steps = 0
        limit = self.step_limit
        i = 0
        while True:
            if steps >= limit:
                raise StepLimitExceeded(f"exceeded {limit} steps")
            steps += 1
            ins = instructions[i]
            opcode = ins.opcode
            cls = opcode & 0x07

            if cls == isa.CLS_ALU64 or cls == isa.CLS_ALU32:
                op = opcode & 0xF0
                wide = cls == isa.CLS_ALU64
                if op == isa.ALU_NEG:
                    if wide:
                        regs[ins.dst] = _u64(-regs[ins.dst])
                    else:
                        regs[ins.dst] = _u32(-_u32(regs[ins.dst]))
                    i += 1
                    continue
                if opcode & isa.SRC_REG:
                    b = regs[ins.src]
                else:
                    b = _u64(ins.imm) if wide else _u32(ins.imm)
                a = regs[ins.dst]
                if not wide:
                    a = _u32(a)
                    b = _u32(b)
                if op == isa.ALU_ADD:
                    r = a + b
                elif op == isa.ALU_SUB:
                    r = a - b
                elif op == isa.ALU_MUL:
                    r = a * b
                elif op == isa.ALU_DIV:
                    r = a // b if b else 0
                elif op == isa.ALU_MOD:
                    r = a % b if b else a
                elif op == isa.ALU_OR:
                    r = a | b
                elif op == isa.ALU_AND:
                    r = a & b
                elif op == isa.ALU_XOR:
                    r = a ^ b
                elif op == isa.ALU_LSH:
                    r = a << (b & (63 if wide else 31))
                elif op == isa.ALU_RSH:
                    r = a >> (b & (63 if wide else 31))
                elif op == isa.ALU_ARSH:
                    if wide:
                        r = _s64(a) >> (b & 63)
                    else:
                        r = _s32(a) >> (b & 31)
                elif op == isa.ALU_MOV:
                    r = b
                else:
                    raise VmFault(f"slot {i}: unhandled ALU op 0x{op:02x}")
                regs[ins.dst] = _u64(r) if wide else _u32(r)
                i += 1
                continue

            if cls == isa.CLS_JMP:
                op = opcode & 0xF0
                if op == isa.JMP_EXIT:
                    return regs[0]
                if op == isa.JMP_JA:
                    i += 1 + ins.offset
                    continue
                if op == isa.JMP_CALL:
                    self._dispatch(ins.imm & 0xFFFFFFFF)
                    i += 1
                    continue
                a = regs[ins.dst]
                b = regs[ins.src] if opcode & isa.SRC_REG else _u64(ins.imm)
                if op == isa.JMP_JEQ:
                    taken = a == b
                elif op == isa.JMP_JNE:
                    taken = a != b
                elif op == isa.JMP_JGT:
                    taken = a > b
                elif op == isa.JMP_JGE:
                    taken = a >= b
                elif op == isa.JMP_JLT:
                    taken = a < b
                elif op == isa.JMP_JLE:
                    taken = a <= b
                elif op == isa.JMP_JSET:
                    taken = bool(a & b)
                elif op == isa.JMP_JSGT:
                    taken = _s64(a) > _s64(b)
                elif op == isa.JMP_JSGE:
                    taken = _s64(a) >= _s64(b)
                elif op == isa.JMP_JSLT:
                    taken = _s64(a) < _s64(b)
                elif op == isa.JMP_JSLE:
                    taken = _s64(a) <= _s64(b)
                else:
                    raise VmFault(f"slot {i}: unhandled jump op 0x{op:02x}")
                i += 1 + (ins.offset if taken else 0)
                continue

            if opcode == isa.OP_LDDW:
                regs[ins.dst] = program.wide_imm64(i)
                i += 2
                continue

            if cls == isa.CLS_LDX:
                addr = regs[ins.src] + ins.offset
                width = isa.SIZE_BYTES[opcode & 0x18]
                if not 0 <= addr <= STACK_SIZE - width:
                    raise VmFault(f"slot {i}: load outside stack")
                regs[ins.dst] = int.from_bytes(stack[addr:addr + width], "little")
                i += 1
                continue

            if cls == isa.CLS_ST or cls == isa.CLS_STX:
                addr = regs[ins.dst] + ins.offset
                width = isa.SIZE_BYTES[opcode & 0x18]
                if not 0 <= addr <= STACK_SIZE - width:
                    raise VmFault(f"slot {i}: store outside stack")
                value = regs[ins.src] if cls == isa.CLS_STX else _u64(ins.imm)
                stack[addr:addr + width] = (value & ((1 << (8 * width)) - 1)) \
                    .to_bytes(width, "little")
                i += 1
                continue

            raise VmFault(f"slot {i}: unhandled opcode 0x{opcode:02x}")

    def _dispatch(self, helper_id: int) -> None:
        entry = self.helpers.entries.get(helper_id)
        if entry is None:
            raise UnknownHelper(helper_id)
        arity = entry[1]
        fn = entry[2]
        regs = self.registers
        try:
            if arity == 2:
                result = fn(self, regs[1], regs[2])
            elif arity == 3:
                result = fn(self, regs[1], regs[2], regs[3])
            elif arity == 4:
                result = fn(self, regs[1], regs[2], regs[3], regs[4])
            elif arity == 1:
                result = fn(self, regs[1])
            else:
                result = fn(self, *regs[1:1 + arity])
        except HelperFault:
            raise
        except SbpfError as exc:
            raise HelperFault(helper_id, exc) from exc
        regs[0] = (result & _MASK64) if isinstance(result, int) else 0
        regs[1:6] = _CLOBBERED


# --- the calling library ------------------------------------------------------
# Thin adapters between VM state and a shared-segment view; the view does
# its own offset bounds checks against the segment.

def _view(vm: VmInstance, helper_id: int) -> Any:
    if vm.segment_view is None:
        raise HelperFault(helper_id, "no shared segment attached")
    return vm.segment_view


def _h_shm_read_u64(vm: VmInstance, offset: int) -> int:
    return _view(vm, HID_SHM_READ_U64).read_u64(offset)


def _h_shm_write_u64(vm: VmInstance, offset: int, value: int) -> int:
    _view(vm, HID_SHM_WRITE_U64).write_u64(offset, value)
    return 0


def _h_shm_read_vec(vm: VmInstance, shm_offset: int, stack_offset: int,
                    length: int) -> int:
    data = _view(vm, HID_SHM_READ_VEC).read_bytes(shm_offset, length)
    vm.stack_store(stack_offset, data)
    return length


def _h_shm_write_vec(vm: VmInstance, stack_offset: int, shm_offset: int,
                     length: int) -> int:
    data = vm.stack_fetch(stack_offset, length)
    _view(vm, HID_SHM_WRITE_VEC).write_bytes(shm_offset, data)
    return length


def _h_ring_push(vm: VmInstance, stack_offset: int, length: int) -> int:
    _view(vm, HID_RING_PUSH).ring_push(vm.stack_fetch(stack_offset, length))
    return length


def _h_pss_predict(vm: VmInstance, f1: int, f2: int, f3: int) -> int:
    return _view(vm, HID_PSS_PREDICT).pss_predict(f1, f2, f3)


def _h_pss_update(vm: VmInstance, f1: int, f2: int, f3: int, outcome: int) -> int:
    _view(vm, HID_PSS_UPDATE).pss_update(f1, f2, f3, outcome)
    return 0


def _h_args_write(vm: VmInstance, stack_offset: int, length: int) -> int:
    _view(vm, HID_ARGS_WRITE).args_write(vm.stack_fetch(stack_offset, length))
    return length


def _h_retval_read(vm: VmInstance, stack_offset: int, length: int) -> int:
    data = _view(vm, HID_RETVAL_READ).retval_read(length)
    vm.stack_store(stack_offset, data)
    return len(data)


def standard_helper_table() -> HelperTable:
    t = HelperTable()
    t.register(HID_SHM_READ_U64, _h_shm_read_u64, "shm_read_u64", 1)
    t.register(HID_SHM_WRITE_U64, _h_shm_write_u64, "shm_write_u64", 2)
    t.register(HID_SHM_READ_VEC, _h_shm_read_vec, "shm_read_vec", 3)
    t.register(HID_SHM_WRITE_VEC, _h_shm_write_vec, "shm_write_vec", 3)
    t.register(HID_RING_PUSH, _h_ring_push, "ring_push", 2)
    t.register(HID_PSS_PREDICT, _h_pss_predict, "pss_predict", 3)
    t.register(HID_PSS_UPDATE, _h_pss_update, "pss_update", 4)
    t.register(HID_ARGS_WRITE, _h_args_write, "args_write", 2)
    t.register(HID_RETVAL_READ, _h_retval_read, "retval_read", 2)
    return t
