"""Static safety verification for decoded programs.

A program is accepted only when four passes all succeed:

1. instruction validation: no writes to the frame pointer, calls name a
   registered helper, direct memory access is confined to r10-relative
   stack slots with constant in-bounds offsets;
2. control-flow analysis: jump targets land on real instruction
   boundaries inside the program, never on a wide-load continuation,
   and never backward, so the control-flow graph is a DAG and every
   execution path is finite and ends at EXIT;
3. dataflow analysis: a must-initialized register analysis over the DAG
   in slot order (all edges point forward) proves no read of a register
   that some path leaves unwritten.  At entry only r1, r2 (the context
   pair) and r10 are readable; a helper call makes r0..r5 readable since
   the interpreter deterministically zeroes the argument registers;
4. resource limits: at most 4096 slots, stack footprint within the
   512-byte frame, at most 4096 call sites.

Acceptance is witnessed by a ``VerifiedProgram``, which cannot be
constructed outside this module; rejection returns a ``VerifierReport``
listing every violation found in the failing pass.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import NamedTuple

from . import isa
from .isa import BpfInstruction, BpfProgram

STACK_SIZE = 512
MAX_PROGRAM_LEN = isa.MAX_PROGRAM_LEN
MAX_CALL_SITES = 4096

ENTRY_INITIALIZED = frozenset({1, 2, 10})


class ViolationKind(enum.Enum):
    OUT_OF_BOUNDS_JUMP = "OutOfBoundsJump"
    BACKWARD_JUMP = "BackwardJump"
    UNREACHABLE_EXIT = "UnreachableExit"
    UNINITIALIZED_REGISTER = "UninitializedRegister"
    STACK_OUT_OF_BOUNDS = "StackOutOfBounds"
    ILLEGAL_MEMORY_ACCESS = "IllegalMemoryAccess"
    WRITE_TO_FRAME_POINTER = "WriteToFramePointer"
    UNKNOWN_HELPER = "UnknownHelper"
    PROGRAM_TOO_LONG = "ProgramTooLong"
    JUMP_INTO_WIDE_LOAD = "JumpIntoWideLoad"


class Violation(NamedTuple):
    slot: int
    kind: ViolationKind
    message: str

    def format_line(self) -> str:
        return f"{self.slot}\t{self.kind.value}\t{self.message}"


@dataclass(frozen=True)
class VerifierReport:
    accepted: bool
    violations: tuple[Violation, ...]
    instruction_count: int

    def format_lines(self) -> list[str]:
        return [v.format_line() for v in self.violations]


_CONSTRUCTION_TOKEN = object()


@dataclass(frozen=True)
class VerifiedProgram:
    """Witness that a program passed every check.

    Only ``verify`` can build one; holding an instance is the load
    gate's proof of safety.
    """

    program: BpfProgram
    helper_ids_used: frozenset[int]
    max_stack_depth: int
    # helper id when the body is exactly [call h; exit]; the interpreter
    # runs that shape without entering its decode loop
    fast_helper: int | None = None

    def __post_init__(self) -> None:
        if getattr(_construction_guard, "token", None) is not _CONSTRUCTION_TOKEN:
            raise TypeError("VerifiedProgram can only be created by verify()")


_construction_guard = threading.local()


def _writes_register(ins: BpfInstruction) -> int | None:
    cls = ins.cls
    if cls in (isa.CLS_ALU64, isa.CLS_ALU32):
        return ins.dst
    if cls == isa.CLS_LDX:
        return ins.dst
    if ins.is_wide_load:
        return ins.dst
    return None


def _reads_registers(ins: BpfInstruction) -> tuple[int, ...]:
    cls = ins.cls
    op = ins.opcode & 0xF0
    has_src = bool(ins.opcode & isa.SRC_REG)
    if cls in (isa.CLS_ALU64, isa.CLS_ALU32):
        if op == isa.ALU_MOV:
            return (ins.src,) if has_src else ()
        if op == isa.ALU_NEG:
            return (ins.dst,)
        return (ins.dst, ins.src) if has_src else (ins.dst,)
    if cls == isa.CLS_JMP:
        if op in (isa.JMP_JA, isa.JMP_CALL):
            return ()
        if op == isa.JMP_EXIT:
            return (0,)
        return (ins.dst, ins.src) if has_src else (ins.dst,)
    if cls == isa.CLS_LDX:
        return (ins.src,)
    if cls == isa.CLS_ST:
        return (ins.dst,)
    if cls == isa.CLS_STX:
        return (ins.dst, ins.src)
    return ()


def _memory_access(ins: BpfInstruction) -> tuple[int, int, int] | None:
    """(base register, offset, width) for a direct load or store."""
    cls = ins.cls
    if ins.is_wide_load or ins.is_wide_continuation:
        return None
    if cls == isa.CLS_LDX:
        return ins.src, ins.offset, isa.SIZE_BYTES[ins.opcode & 0x18]
    if cls in (isa.CLS_ST, isa.CLS_STX):
        return ins.dst, ins.offset, isa.SIZE_BYTES[ins.opcode & 0x18]
    return None


def _successors(index: int, ins: BpfInstruction) -> list[int] | None:
    """CFG successor slots, or None for EXIT."""
    if ins.is_wide_load:
        return [index + 2]
    if ins.cls != isa.CLS_JMP:
        return [index + 1]
    op = ins.opcode & 0xF0
    if op == isa.JMP_EXIT:
        return None
    if op == isa.JMP_CALL:
        return [index + 1]
    target = index + 1 + ins.offset
    if op == isa.JMP_JA:
        return [target]
    return [index + 1, target]


def verify(program: BpfProgram,
           registered_helpers: frozenset[int] | set[int]) -> VerifiedProgram | VerifierReport:
    """Run all passes; return a witness on success, a report on failure."""
    helpers = frozenset(registered_helpers)
    instructions = program.instructions
    count = len(instructions)
    violations: list[Violation] = []

    if count == 0:
        violations.append(Violation(0, ViolationKind.UNREACHABLE_EXIT,
                                    "empty program has no exit"))
        return VerifierReport(False, tuple(violations), 0)
    if count > MAX_PROGRAM_LEN:
        violations.append(Violation(
            MAX_PROGRAM_LEN, ViolationKind.PROGRAM_TOO_LONG,
            f"{count} slots exceeds the {MAX_PROGRAM_LEN}-slot limit"))
        return VerifierReport(False, tuple(violations), count)

    helper_ids_used: set[int] = set()
    max_depth = 0
    call_sites = 0

    # Pass 1: per-instruction validation.
    for i, ins in enumerate(instructions):
        if ins.is_wide_continuation:
            continue
        written = _writes_register(ins)
        if written == 10:
            violations.append(Violation(
                i, ViolationKind.WRITE_TO_FRAME_POINTER,
                f"{ins.mnemonic()} writes r10"))
        if ins.cls == isa.CLS_JMP and (ins.opcode & 0xF0) == isa.JMP_CALL:
            call_sites += 1
            helper_id = ins.imm & 0xFFFFFFFF
            if helper_id not in helpers:
                violations.append(Violation(
                    i, ViolationKind.UNKNOWN_HELPER,
                    f"helper {helper_id} is not registered"))
            else:
                helper_ids_used.add(helper_id)
        access = _memory_access(ins)
        if access is not None:
            base, offset, width = access
            if base != 10:
                violations.append(Violation(
                    i, ViolationKind.ILLEGAL_MEMORY_ACCESS,
                    f"memory access through r{base}; only r10-relative "
                    f"stack access is allowed"))
            elif not (-STACK_SIZE <= offset and offset + width <= 0):
                violations.append(Violation(
                    i, ViolationKind.STACK_OUT_OF_BOUNDS,
                    f"{width}-byte access at r10{offset:+d} leaves the "
                    f"{STACK_SIZE}-byte stack"))
            else:
                max_depth = max(max_depth, -offset)
    if violations:
        return VerifierReport(False, tuple(violations), count)

    # Pass 2: control flow.  Edges only point forward, so reachability
    # and the later dataflow pass can both walk slots in index order.
    is_continuation = [ins.is_wide_continuation for ins in instructions]
    succ: dict[int, list[int]] = {}
    reachable = [False] * count
    reachable[0] = True
    for i, ins in enumerate(instructions):
        if is_continuation[i] or not reachable[i]:
            continue
        targets = _successors(i, ins)
        if targets is None:
            succ[i] = []
            continue
        op = ins.opcode & 0xF0
        taken_target = (i + 1 + ins.offset
                        if ins.cls == isa.CLS_JMP and op not in (isa.JMP_CALL, isa.JMP_EXIT)
                        else None)
        ok: list[int] = []
        for t in dict.fromkeys(targets):
            # A displacement edge is the taken branch of a jump; the
            # fallthrough of a conditional, a call return, and plain
            # sequencing are ordinary forward edges.
            is_jump_edge = t == taken_target
            if not 0 <= t < count:
                if is_jump_edge:
                    violations.append(Violation(
                        i, ViolationKind.OUT_OF_BOUNDS_JUMP,
                        f"jump target {t} outside [0, {count})"))
                else:
                    violations.append(Violation(
                        i, ViolationKind.UNREACHABLE_EXIT,
                        "execution falls off the end of the program"))
                continue
            if is_continuation[t]:
                violations.append(Violation(
                    i, ViolationKind.JUMP_INTO_WIDE_LOAD,
                    f"jump target {t} is inside a wide load"))
                continue
            if is_jump_edge and t <= i:
                violations.append(Violation(
                    i, ViolationKind.BACKWARD_JUMP,
                    f"jump target {t} does not move forward"))
                continue
            ok.append(t)
            reachable[t] = True
        succ[i] = ok
    if violations:
        return VerifierReport(False, tuple(violations), count)

    # Pass 3: must-initialized registers over the DAG.
    state: dict[int, frozenset[int]] = {0: ENTRY_INITIALIZED}
    for i, ins in enumerate(instructions):
        if is_continuation[i] or not reachable[i]:
            continue
        live = state.get(i, ENTRY_INITIALIZED)
        for reg in _reads_registers(ins):
            if reg not in live:
                violations.append(Violation(
                    i, ViolationKind.UNINITIALIZED_REGISTER,
                    f"r{reg} read before initialization"))
        out = set(live)
        written = _writes_register(ins)
        if written is not None and written != 10:
            out.add(written)
        if ins.cls == isa.CLS_JMP and (ins.opcode & 0xF0) == isa.JMP_CALL:
            out.update({0, 1, 2, 3, 4, 5})
        out_f = frozenset(out)
        for t in succ.get(i, ()):
            prev = state.get(t)
            state[t] = out_f if prev is None else prev & out_f
    if violations:
        return VerifierReport(False, tuple(violations), count)

    # Pass 4: resource limits (length already gated above).
    if call_sites > MAX_CALL_SITES:
        violations.append(Violation(
            0, ViolationKind.PROGRAM_TOO_LONG,
            f"{call_sites} call sites exceeds {MAX_CALL_SITES}"))
        return VerifierReport(False, tuple(violations), count)

    fast_helper = None
    if (count == 2
            and instructions[0].opcode == isa.CLS_JMP | isa.JMP_CALL
            and instructions[1].opcode == isa.CLS_JMP | isa.JMP_EXIT):
        fast_helper = instructions[0].imm & 0xFFFFFFFF

    _construction_guard.token = _CONSTRUCTION_TOKEN
    try:
        return VerifiedProgram(program, frozenset(helper_ids_used), max_depth,
                               fast_helper)
    finally:
        _construction_guard.token = None


def report_for(result: VerifiedProgram | VerifierReport,
               instruction_count: int | None = None) -> VerifierReport:
    """Normalize a verify result to a report (accepted reports are empty)."""
    if isinstance(result, VerifierReport):
        return result
    return VerifierReport(True, (), len(result.program))
