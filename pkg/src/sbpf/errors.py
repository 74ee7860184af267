"""Exception hierarchy shared across the package.

Every failure the library reports deliberately is an ``SbpfError`` subclass;
anything else escaping is a bug.  Decode/encode errors carry the offending
instruction slot so tooling can point at the byte position (slot * 8).
"""

from __future__ import annotations


class SbpfError(Exception):
    """Base class for all errors raised by this package."""


# --- bytecode decode/encode -------------------------------------------------

class DecodeError(SbpfError):
    """Malformed instruction stream."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class InvalidLength(DecodeError):
    pass


class InvalidOpcode(DecodeError):
    def __init__(self, position: int, opcode: int, detail: str = ""):
        msg = f"slot {position}: invalid opcode 0x{opcode:02x}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg, position)
        self.opcode = opcode


class InvalidRegister(DecodeError):
    def __init__(self, position: int, register: int):
        super().__init__(f"slot {position}: register index {register} > 10", position)
        self.register = register


class TruncatedWideLoad(DecodeError):
    def __init__(self, position: int):
        super().__init__(f"slot {position}: wide immediate load at final slot", position)


class EncodeError(SbpfError):
    pass


class UnsupportedInstruction(EncodeError):
    pass


class EmptyProgram(UnsupportedInstruction):
    pass


# --- interpreter ------------------------------------------------------------

class VmError(SbpfError):
    pass


class StepLimitExceeded(VmError):
    pass


class UnknownHelper(VmError):
    def __init__(self, helper_id: int):
        super().__init__(f"no helper registered under id {helper_id}")
        self.helper_id = helper_id


class HelperFault(VmError):
    """A helper rejected its (data-dependent) arguments at runtime."""

    def __init__(self, helper_id: int, cause: str):
        super().__init__(f"helper {helper_id}: {cause}")
        self.helper_id = helper_id
        self.cause = cause


class VmFault(VmError):
    """Defensive runtime guard tripped; unreachable for verified programs."""


class DuplicateHelper(VmError):
    pass


class ReservedId(VmError):
    pass


# --- shared memory manager --------------------------------------------------

class ShmemError(SbpfError):
    pass


class AlreadyAllocated(ShmemError):
    pass


class NotFound(ShmemError):
    pass


class OutOfMemory(ShmemError):
    pass


class InvalidThread(ShmemError):
    pass


# --- library integrity ------------------------------------------------------

class IntegrityError(SbpfError):
    pass


class EmptyPayload(IntegrityError):
    pass


class MalformedContainer(IntegrityError):
    pass


class IntegrityRejected(IntegrityError):
    pass


class VerificationRejected(IntegrityError):
    """Raised with the local VerifierReport, or with the textual report a
    remote verifier sent back over the channel."""

    def __init__(self, report):
        if isinstance(report, str):
            lines = report
        else:
            lines = "; ".join(f"slot {s}: {k}" for s, k, _ in report.violations[:4])
        super().__init__(f"program rejected by verifier: {lines}")
        self.report = report


class AllocationFailed(IntegrityError):
    pass


# --- ring buffer ------------------------------------------------------------

class RingError(SbpfError):
    pass


class RecordTooLarge(RingError):
    pass


# --- boundary transport -----------------------------------------------------

class TransportError(SbpfError):
    pass


class ChannelClosed(TransportError):
    pass


class PathTooLong(TransportError):
    pass


class LengthExceedsSlot(TransportError):
    pass


class ServiceUnavailable(TransportError):
    pass


class ServiceError(TransportError):
    """Catch-all for service-side failures reported over the channel."""

    def __init__(self, status: int, message: str = ""):
        super().__init__(message or f"service returned error status {status}")
        self.status = status
