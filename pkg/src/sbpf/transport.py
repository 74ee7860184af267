"""Emulated user-kernel boundary.

Two processes share one memory segment.  The service process plays the
kernel: it owns the segment, answers copy-based requests over a unix
socket, and consumes data the user side places in shared memory.  The
user process talks to it through a BoundaryChannel.

Two request families cross the socket:

* copy ops serialize their payload into the message both ways, the way
  a syscall pays for copy_from_user and copy_to_user;
* doorbell ops carry only an opcode and a thread id, because the actual
  data already sits in the shared segment.

Both sides count the payload bytes of data-plane messages; doorbells add
zero by construction.  That accounting is what the benchmarks report.

The statfs-like responder is deliberately synthetic: a record computed
from the path alone, so the copy path and the shared-memory path can be
compared bit for bit without touching a filesystem.
"""

from __future__ import annotations

import os
import socket
import struct
import threading
import time
from collections import defaultdict
from functools import lru_cache
from typing import NamedTuple

from . import shmem
from .errors import (
    ChannelClosed,
    IntegrityRejected,
    InvalidThread,
    LengthExceedsSlot,
    NotFound,
    PathTooLong,
    RingError,
    ServiceError,
    ServiceUnavailable,
    ShmemError,
    VerificationRejected,
)
from .errors import DecodeError, IntegrityError
from .integrity import parse_container, verify_library
from .isa import call, decode_program, exit_, program_from_instructions
from .pss import (
    DEFAULT_SALTS,
    DEFAULT_THETA,
    TABLE_BYTES,
    PerceptronModel,
    decode_batch,
)
from .ring import DEFAULT_CAPACITY, SpscRing
from .shmem import DEFAULT_LAYOUT, PSS_BASE, RING_BASE, SegmentAccess, ThreadSlotLayout
from .verifier import VerifiedProgram, verify
from .vm import (
    HID_ARGS_WRITE,
    HID_RETVAL_READ,
    HID_SHM_WRITE_VEC,
    STANDARD_HELPER_IDS,
    VmInstance,
    standard_helper_table,
)

# request: opcode u8, task/thread id u64, payload length u32, payload
# response: status u8, value u64, payload length u32, payload
_HEADER = struct.Struct("<BQI")

OP_ALLOC = 1
OP_RELEASE = 2
OP_BASELINE_STATFS = 3
OP_DOORBELL_STATFS = 4
OP_SHUTDOWN = 5
OP_LOAD_LIBRARY = 6
OP_STATS = 7
OP_RING_RECORD = 8
OP_RING_DRAIN = 9
OP_PSS_FLUSH = 10
OP_PSS_RESET = 11
OP_STATS_EXT = 12
OP_ATTACH_TASK = 13

# ops that move benchmark data; everything else is control plane and does
# not touch the copy/round-trip counters
DATA_PLANE_OPS = frozenset({
    OP_BASELINE_STATFS, OP_DOORBELL_STATFS,
    OP_RING_RECORD, OP_RING_DRAIN, OP_PSS_FLUSH,
})

STATUS_OK = 0
STATUS_INTEGRITY_REJECTED = 1
STATUS_VERIFIER_REJECTED = 2
STATUS_SHMEM = 3
STATUS_BAD_THREAD = 4
STATUS_BAD_LENGTH = 5
STATUS_BAD_REQUEST = 6
STATUS_NOT_VERIFIED = 7

MAX_PATH_LEN = 4095

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


# --- the synthetic statfs record ------------------------------------------------

STAT_RECORD_LEN = 64
_STAT = struct.Struct("<QQQQ")
_STAT_PAD = bytes(STAT_RECORD_LEN - _STAT.size)
STAT_BLOCK_SIZE = 4096


class StatRecord(NamedTuple):
    path_len: int
    path_hash: int
    block_size: int
    blocks: int

    def to_bytes(self) -> bytes:
        return _STAT.pack(self.path_len, self.path_hash,
                          self.block_size, self.blocks) + _STAT_PAD

    @classmethod
    def from_bytes(cls, raw: bytes) -> "StatRecord":
        if len(raw) != STAT_RECORD_LEN:
            raise ValueError(f"expected {STAT_RECORD_LEN} bytes, got {len(raw)}")
        return cls(*_STAT.unpack_from(raw, 0))

    @classmethod
    def for_path(cls, path) -> "StatRecord":
        digest = fnv1a64(path)
        return cls(path_len=len(path), path_hash=digest,
                   block_size=STAT_BLOCK_SIZE, blocks=digest % (1 << 20))


def stat_record_bytes(path) -> bytes:
    digest = fnv1a64(path)
    return _STAT.pack(len(path), digest, STAT_BLOCK_SIZE,
                      digest % (1 << 20)) + _STAT_PAD


# --- message framing ------------------------------------------------------------

def recv_exact(sock: socket.socket, n: int) -> bytes:
    """Read exactly n bytes; short reads mean the peer went away."""
    chunks = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ChannelClosed(f"peer closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return chunks[0] if len(chunks) == 1 else b"".join(chunks)


def send_message(sock: socket.socket, code: int, ident: int, payload: bytes) -> None:
    sock.sendall(_HEADER.pack(code, ident, len(payload)) + payload)


def recv_message(sock: socket.socket) -> tuple[int, int, bytes]:
    code, ident, length = _HEADER.unpack(recv_exact(sock, _HEADER.size))
    payload = recv_exact(sock, length) if length else b""
    return code, ident, payload


# --- user-side view of the shared segment ---------------------------------------

class SegmentView:
    """Helper target bound to one thread's slot plus the shared regions.

    Raw offset access is confined to the calling thread's own args/retval
    slot and the prediction table; the ring is reachable only through
    ring_push.  The confinement is what makes concurrent threads unable
    to scribble over each other through the helper layer.
    """

    def __init__(self, access: SegmentAccess, thread_id: int,
                 ring: SpscRing, model: PerceptronModel,
                 layout: ThreadSlotLayout = DEFAULT_LAYOUT) -> None:
        if not (0 <= thread_id < layout.max_threads):
            raise InvalidThread(f"thread {thread_id}")
        self._access = access
        self._ring = ring
        self._model = model
        self.thread_id = thread_id
        self.layout = layout
        self._slot_lo = layout.args_offset(thread_id)
        self._slot_hi = self._slot_lo + layout.args_size + layout.ret_size
        self._ret_lo = layout.ret_offset(thread_id)

    def _check_window(self, offset: int, length: int, writing: bool) -> None:
        if length < 0:
            raise ShmemError(f"negative length {length}")
        end = offset + length
        # writes stop at the args/retval boundary; the service owns retval
        slot_hi = self._ret_lo if writing else self._slot_hi
        if self._slot_lo <= offset and end <= slot_hi:
            return
        if PSS_BASE <= offset and end <= PSS_BASE + shmem.PSS_SIZE:
            return
        raise ShmemError(
            f"offset range [{offset}, {end}) outside thread "
            f"{self.thread_id}'s windows")

    def read_u64(self, offset: int) -> int:
        self._check_window(offset, 8, writing=False)
        return self._access.read_u64(offset)

    def write_u64(self, offset: int, value: int) -> None:
        self._check_window(offset, 8, writing=True)
        self._access.write_u64(offset, value)

    def read_bytes(self, offset: int, length: int) -> bytes:
        self._check_window(offset, length, writing=False)
        return self._access.read_bytes(offset, length)

    def write_bytes(self, offset: int, data: bytes) -> None:
        self._check_window(offset, len(data), writing=True)
        self._access.write_bytes(offset, data)

    def ring_push(self, payload: bytes) -> None:
        if not self._ring.push(payload):
            raise RingError("ring full")

    def pss_predict(self, f1: int, f2: int, f3: int) -> int:
        decision, _ = self._model.predict(f1, f2, f3)
        return decision

    def pss_update(self, f1: int, f2: int, f3: int, outcome: int) -> None:
        self._model.update(f1, f2, f3, outcome)

    def args_write(self, data: bytes) -> None:
        if len(data) > self.layout.args_size:
            raise LengthExceedsSlot(
                f"{len(data)} bytes into a {self.layout.args_size}-byte slot")
        self._access.write_bytes(self._slot_lo, data)

    def retval_read(self, length: int) -> bytes:
        if length > self.layout.ret_size:
            raise LengthExceedsSlot(
                f"{length} bytes from a {self.layout.ret_size}-byte slot")
        return self._access.read_bytes(self._ret_lo, length)


# --- service-side zero-copy accessors --------------------------------------------

def sbpf_copy_from_user(task, thread_id: int, length: int) -> memoryview:
    """Direct view of a thread's args memory; no bytes move."""
    layout = task.layout
    if not (0 <= thread_id < layout.max_threads):
        raise InvalidThread(f"thread {thread_id}")
    if length > layout.args_size:
        raise LengthExceedsSlot(f"{length} > args_size {layout.args_size}")
    base = layout.args_offset(thread_id)
    return task.buf[base:base + length]


def sbpf_copy_to_user(task, thread_id: int, data: bytes) -> None:
    """Place response bytes in a thread's retval memory."""
    layout = task.layout
    if not (0 <= thread_id < layout.max_threads):
        raise InvalidThread(f"thread {thread_id}")
    if len(data) > layout.ret_size:
        raise LengthExceedsSlot(f"{len(data)} > ret_size {layout.ret_size}")
    base = layout.ret_offset(thread_id)
    task.buf[base:base + len(data)] = data


# --- client channel ---------------------------------------------------------------

_CONNECT_DEADLINE = 5.0

_STATUS_ERRORS = {
    STATUS_INTEGRITY_REJECTED: IntegrityRejected,
    STATUS_SHMEM: ShmemError,
    STATUS_BAD_THREAD: InvalidThread,
    STATUS_BAD_LENGTH: LengthExceedsSlot,
    STATUS_NOT_VERIFIED: ServiceError,
    STATUS_BAD_REQUEST: ServiceError,
}


class BoundaryChannel:
    """Client end of the socket; one in-flight request at a time.

    copy_bytes counts request plus response payload bytes of data-plane
    messages; round_trips counts those messages.  Doorbell-style ops have
    empty payloads, so they increment copy_bytes by zero without any
    special casing.
    """

    def __init__(self, socket_path: str,
                 connect_deadline: float = _CONNECT_DEADLINE) -> None:
        self._sock = _connect_with_retry(socket_path, connect_deadline)
        self._lock = threading.Lock()
        self.copy_bytes = 0
        self.round_trips = 0
        self._local_model: PerceptronModel | None = None
        self._closed = False

    # -- plumbing

    def request(self, opcode: int, ident: int = 0,
                payload: bytes = b"") -> tuple[int, bytes]:
        """Send one message and wait for its response; returns (value, payload)."""
        with self._lock:
            if self._closed:
                raise ChannelClosed("channel is closed")
            send_message(self._sock, opcode, ident, payload)
            status, value, resp = recv_message(self._sock)
            if opcode in DATA_PLANE_OPS:
                self.round_trips += 1
                self.copy_bytes += len(payload) + len(resp)
        if status != STATUS_OK:
            self._raise_for(status, resp)
        return value, resp

    @staticmethod
    def _raise_for(status: int, resp: bytes) -> None:
        message = resp.decode("utf-8", "replace")
        if status == STATUS_VERIFIER_REJECTED:
            raise VerificationRejected(message)
        exc = _STATUS_ERRORS.get(status)
        if exc is ServiceError or exc is None:
            raise ServiceError(status, message)
        raise exc(message)

    def close(self) -> None:
        with self._lock:
            if not self._closed:
                self._closed = True
                self._sock.close()

    def __enter__(self) -> "BoundaryChannel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- control plane

    def alloc_segment(self, task_id: int) -> str:
        _, name = self.request(OP_ALLOC, task_id)
        return name.decode("ascii")

    def attach_task(self, task_id: int) -> None:
        self.request(OP_ATTACH_TASK, task_id)

    def release_segment(self, task_id: int) -> None:
        self.request(OP_RELEASE, task_id)

    def load_library(self, container: bytes) -> int:
        """Submit a signed container; returns the segment base handle.

        The handle arrives only when both the tag and the verifier accept;
        a rejected load carries no handle at all.
        """
        handle, _ = self.request(OP_LOAD_LIBRARY, 0, container)
        return handle

    def stats(self) -> tuple[int, int]:
        _, raw = self.request(OP_STATS)
        return struct.unpack("<QQ", raw)

    def stats_ext(self) -> dict:
        _, raw = self.request(OP_STATS_EXT)
        checks, runs, consume_ns, drained = struct.unpack("<QQQQ", raw)
        return {"integrity_checks": checks, "verifier_runs": runs,
                "consume_ns": consume_ns, "drained_records": drained}

    def shutdown_service(self) -> None:
        self.request(OP_SHUTDOWN)

    # -- data plane

    def ring_record(self, payload: bytes) -> None:
        self.request(OP_RING_RECORD, 0, payload)

    def ring_drain(self, max_records: int = 0) -> int:
        count, _ = self.request(OP_RING_DRAIN, max_records)
        return count

    def pss_flush(self, raw: bytes) -> None:
        self.request(OP_PSS_FLUSH, 0, raw)

    # -- baseline-side model replica

    def local_pss_model(self) -> PerceptronModel:
        if self._local_model is None:
            self._local_model = PerceptronModel(
                bytearray(TABLE_BYTES), theta=DEFAULT_THETA, salts=DEFAULT_SALTS)
        return self._local_model

    def pss_reset(self) -> None:
        """Zero the service-side table and the local replica together."""
        self.request(OP_PSS_RESET)
        if self._local_model is not None:
            self._local_model.reset()


def _connect_with_retry(socket_path: str, deadline: float) -> socket.socket:
    end = time.monotonic() + deadline
    while True:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            sock.connect(socket_path)
            return sock
        except (FileNotFoundError, ConnectionRefusedError):
            sock.close()
            if time.monotonic() >= end:
                raise ServiceUnavailable(f"no service at {socket_path}")
            time.sleep(0.02)


# --- the two statfs paths ---------------------------------------------------------

def baseline_statfs(channel: BoundaryChannel, path: bytes) -> StatRecord:
    """Copy the path across, copy the record back."""
    if not 1 <= len(path) <= MAX_PATH_LEN:
        raise PathTooLong(f"path length {len(path)}")
    _, raw = channel.request(OP_BASELINE_STATFS, 0, path)
    return StatRecord.from_bytes(raw)


@lru_cache(maxsize=None)
def args_program() -> VerifiedProgram:
    result = verify(program_from_instructions([call(HID_ARGS_WRITE), exit_()]),
                    STANDARD_HELPER_IDS)
    assert isinstance(result, VerifiedProgram)
    return result


@lru_cache(maxsize=None)
def writevec_program() -> VerifiedProgram:
    result = verify(program_from_instructions([call(HID_SHM_WRITE_VEC), exit_()]),
                    STANDARD_HELPER_IDS)
    assert isinstance(result, VerifiedProgram)
    return result


@lru_cache(maxsize=None)
def retval_program() -> VerifiedProgram:
    result = verify(program_from_instructions([call(HID_RETVAL_READ), exit_()]),
                    STANDARD_HELPER_IDS)
    assert isinstance(result, VerifiedProgram)
    return result


_LEN_HEADER = struct.Struct("<Q")
_STACK = 512


def sbpf_statfs(channel: BoundaryChannel, thread_id: int, path: bytes,
                machine: VmInstance) -> StatRecord:
    """Stage the path in the thread's args memory through the VM, ring the
    doorbell, read the record back out of retval memory.

    No payload crosses the socket in either direction.  Paths wider than
    the VM stack go in 512-byte pieces: the first piece through args_write,
    the rest through shm_write_vec aimed at the same slot.
    """
    view = machine.segment_view
    staged = _LEN_HEADER.pack(len(path)) + path
    first = staged[:_STACK]
    machine.load_stack(first, at=0)
    machine.execute(args_program(), context=(0, len(first)))
    if len(staged) > _STACK:
        slot_base = view.layout.args_offset(thread_id)
        written = _STACK
        while written < len(staged):
            chunk = staged[written:written + _STACK]
            machine.load_stack(chunk, at=0)
            machine.execute(writevec_program(),
                            context=(0, slot_base + written),
                            entry_regs={3: len(chunk)})
            written += len(chunk)
    channel.request(OP_DOORBELL_STATFS, thread_id)
    machine.execute(retval_program(), context=(0, STAT_RECORD_LEN))
    return StatRecord.from_bytes(machine.read_stack(STAT_RECORD_LEN))


# --- user session: segment attachment plus per-thread machines ---------------------

class UserSession:
    """Client-side bundle: channel, attached segment, per-thread machines.

    The base handle only exists after load_library succeeds, and every
    SegmentAccess requires it, so no helper can touch the segment before
    the service has admitted a signed, verified library.
    """

    def __init__(self, channel: BoundaryChannel, task_id: int,
                 layout: ThreadSlotLayout = DEFAULT_LAYOUT) -> None:
        self.channel = channel
        self.task_id = task_id
        self.layout = layout
        name = channel.alloc_segment(task_id)
        self._backing = shmem.attach_segment(name)
        self.base_handle: int | None = None
        self._views: dict[int, SegmentView] = {}
        self._machines: dict[int, VmInstance] = {}
        self._ring: SpscRing | None = None

    def load(self, container: bytes) -> int:
        self.base_handle = self.channel.load_library(container)
        return self.base_handle

    @property
    def ring(self) -> SpscRing:
        if self._ring is None:
            self._ring = SpscRing(self._backing.buf, base=RING_BASE,
                                  capacity=DEFAULT_CAPACITY)
        return self._ring

    def view(self, thread_id: int) -> SegmentView:
        if thread_id not in self._views:
            if self.base_handle is None:
                raise ShmemError("no library loaded; segment access is gated")
            access = SegmentAccess(self._backing.buf, self.base_handle,
                                   shmem.SEG_SIZE)
            model = PerceptronModel(self._backing.buf, base=PSS_BASE,
                                    theta=DEFAULT_THETA, salts=DEFAULT_SALTS)
            self._views[thread_id] = SegmentView(
                access, thread_id, self.ring, model, self.layout)
        return self._views[thread_id]

    def machine(self, thread_id: int) -> VmInstance:
        if thread_id not in self._machines:
            self._machines[thread_id] = VmInstance(
                standard_helper_table(), segment_view=self.view(thread_id))
        return self._machines[thread_id]

    def close(self, release: bool = True) -> None:
        self._views.clear()
        self._machines.clear()
        self._ring = None
        if release:
            try:
                self.channel.release_segment(self.task_id)
            except (ServiceError, ChannelClosed, NotFound, ShmemError):
                pass
        self._backing.buf.release()
        self._backing.close()


# --- the service process ------------------------------------------------------------

class ServiceTask:
    """Kernel-side state for one allocated segment."""

    def __init__(self, segment: shmem.SharedSegment,
                 layout: ThreadSlotLayout = DEFAULT_LAYOUT) -> None:
        self.segment = segment
        self.layout = layout
        self.buf = segment.buf
        self.ring = SpscRing(segment.buf, base=RING_BASE,
                             capacity=DEFAULT_CAPACITY, reset=True)
        self.model = PerceptronModel(segment.buf, base=PSS_BASE,
                                     theta=DEFAULT_THETA, salts=DEFAULT_SALTS)
        self.verified = False
        self.slot_locks: defaultdict[int, threading.Lock] = defaultdict(threading.Lock)


class KernelService:
    """Privileged side of the boundary: segment owner and request responder.

    One thread per connection; a connection binds to at most one task.
    Counters mirror the client's data-plane accounting rule and add the
    admission-gate counts the integrity tests inspect.
    """

    def __init__(self, socket_path: str, key: bytes,
                 rng_seed: int | None = None) -> None:
        self.socket_path = socket_path
        self.key = key
        self.manager = shmem.ManagerState(rng_seed=rng_seed)
        self.tasks: dict[int, ServiceTask] = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self.copy_bytes = 0
        self.round_trips = 0
        self.integrity_checks = 0
        self.verifier_runs = 0
        self.consume_ns = 0
        self.drained_records = 0
        self._consume_scratch = bytearray(DEFAULT_CAPACITY)

    # -- lifecycle

    def serve_forever(self) -> None:
        listener = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            listener.bind(self.socket_path)
            listener.listen(64)
            listener.settimeout(0.2)
            while not self._stop.is_set():
                try:
                    conn, _ = listener.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                worker = threading.Thread(target=self._serve_connection,
                                          args=(conn,), daemon=True)
                worker.start()
        finally:
            listener.close()
            try:
                os.unlink(self.socket_path)
            except OSError:
                pass
            with self._lock:
                self.tasks.clear()
            self.manager.release_all()

    def _serve_connection(self, conn: socket.socket) -> None:
        state = _ConnState()
        try:
            while not self._stop.is_set():
                try:
                    opcode, ident, payload = recv_message(conn)
                except (ChannelClosed, OSError):
                    break
                status, value, resp = self._handle(state, opcode, ident, payload)
                send_message(conn, status, value, resp)
                if opcode in DATA_PLANE_OPS:
                    with self._lock:
                        self.round_trips += 1
                        self.copy_bytes += len(payload) + len(resp)
                if opcode == OP_SHUTDOWN:
                    self._stop.set()
        finally:
            conn.close()

    # -- dispatch

    def _handle(self, state: "_ConnState", opcode: int, ident: int,
                payload: bytes) -> tuple[int, int, bytes]:
        handler = self._HANDLERS.get(opcode)
        if handler is None:
            return STATUS_BAD_REQUEST, 0, f"unknown opcode {opcode}".encode()
        try:
            return handler(self, state, ident, payload)
        except InvalidThread as exc:
            return STATUS_BAD_THREAD, 0, str(exc).encode()
        except LengthExceedsSlot as exc:
            return STATUS_BAD_LENGTH, 0, str(exc).encode()
        except ShmemError as exc:
            return STATUS_SHMEM, 0, str(exc).encode()
        except Exception as exc:
            # a misbehaving request must not take the connection down
            return STATUS_BAD_REQUEST, 0, str(exc).encode()

    def _task_for(self, state: "_ConnState") -> ServiceTask | None:
        if state.task_id is None:
            return None
        return self.tasks.get(state.task_id)

    # -- control handlers

    def _op_alloc(self, state, ident, payload):
        with self._lock:
            segment = self.manager.allocate(ident)
            self.tasks[ident] = ServiceTask(segment)
        state.task_id = ident
        return STATUS_OK, 0, segment.name.encode("ascii")

    def _op_attach(self, state, ident, payload):
        with self._lock:
            if ident not in self.tasks:
                return STATUS_SHMEM, 0, f"task {ident} not allocated".encode()
        state.task_id = ident
        return STATUS_OK, 0, b""

    def _op_release(self, state, ident, payload):
        with self._lock:
            self.tasks.pop(ident, None)
            self.manager.release(ident)
        if state.task_id == ident:
            state.task_id = None
        return STATUS_OK, 0, b""

    def _op_load(self, state, ident, payload):
        task = self._task_for(state)
        if task is None:
            return STATUS_BAD_REQUEST, 0, b"no task bound to this connection"
        with self._lock:
            self.integrity_checks += 1
        try:
            container = parse_container(payload)
            if not verify_library(container, self.key):
                return STATUS_INTEGRITY_REJECTED, 0, b"authentication tag mismatch"
        except IntegrityError as exc:
            return STATUS_INTEGRITY_REJECTED, 0, str(exc).encode()
        with self._lock:
            self.verifier_runs += 1
        try:
            program = decode_program(container.payload)
        except DecodeError as exc:
            return STATUS_VERIFIER_REJECTED, 0, str(exc).encode()
        result = verify(program, STANDARD_HELPER_IDS)
        if not isinstance(result, VerifiedProgram):
            lines = "\n".join(v.format_line() for v in result.violations)
            return STATUS_VERIFIER_REJECTED, 0, lines.encode()
        task.verified = True
        return STATUS_OK, task.segment.base_handle, b""

    def _op_stats(self, state, ident, payload):
        with self._lock:
            raw = struct.pack("<QQ", self.copy_bytes, self.round_trips)
        return STATUS_OK, 0, raw

    def _op_stats_ext(self, state, ident, payload):
        with self._lock:
            raw = struct.pack("<QQQQ", self.integrity_checks, self.verifier_runs,
                              self.consume_ns, self.drained_records)
        return STATUS_OK, 0, raw

    def _op_shutdown(self, state, ident, payload):
        return STATUS_OK, 0, b""

    def _op_pss_reset(self, state, ident, payload):
        task = self._task_for(state)
        if task is None:
            return STATUS_BAD_REQUEST, 0, b"no task bound to this connection"
        task.model.reset()
        return STATUS_OK, 0, b""

    # -- data-plane handlers

    def _op_baseline_statfs(self, state, ident, payload):
        if not 1 <= len(payload) <= MAX_PATH_LEN:
            return STATUS_BAD_LENGTH, 0, f"path length {len(payload)}".encode()
        return STATUS_OK, 0, stat_record_bytes(payload)

    def _op_doorbell_statfs(self, state, ident, payload):
        task = self._task_for(state)
        if task is None:
            return STATUS_BAD_REQUEST, 0, b"no task bound to this connection"
        if not task.verified:
            return STATUS_NOT_VERIFIED, 0, b"no verified library loaded"
        thread_id = ident
        with task.slot_locks[thread_id]:
            args = sbpf_copy_from_user(task, thread_id, task.layout.args_size)
            (path_len,) = _LEN_HEADER.unpack_from(args, 0)
            if not 1 <= path_len <= task.layout.args_size - 8:
                return STATUS_BAD_LENGTH, 0, f"path length {path_len}".encode()
            record = stat_record_bytes(args[8:8 + path_len])
            sbpf_copy_to_user(task, thread_id, record)
        return STATUS_OK, 0, b""

    def _consume(self, record: bytes) -> None:
        # stand-in for real kernel-side work: take the bytes somewhere
        if len(record) > len(self._consume_scratch):
            self._consume_scratch = bytearray(len(record))
        self._consume_scratch[:len(record)] = record

    def _op_ring_record(self, state, ident, payload):
        started = time.perf_counter_ns()
        self._consume(payload)
        elapsed = time.perf_counter_ns() - started
        with self._lock:
            self.consume_ns += elapsed
            self.drained_records += 1
        return STATUS_OK, 0, b""

    def _op_ring_drain(self, state, ident, payload):
        task = self._task_for(state)
        if task is None:
            return STATUS_BAD_REQUEST, 0, b"no task bound to this connection"
        limit = ident if ident else 1 << 30
        started = time.perf_counter_ns()
        records = task.ring.drain_batch(limit)
        for record in records:
            self._consume(record)
        elapsed = time.perf_counter_ns() - started
        with self._lock:
            self.consume_ns += elapsed
            self.drained_records += len(records)
        return STATUS_OK, len(records), b""

    def _op_pss_flush(self, state, ident, payload):
        task = self._task_for(state)
        if task is None:
            return STATUS_BAD_REQUEST, 0, b"no task bound to this connection"
        for features, outcome in decode_batch(payload):
            task.model.update(*features, outcome)
        return STATUS_OK, 0, b""

    _HANDLERS = {
        OP_ALLOC: _op_alloc,
        OP_ATTACH_TASK: _op_attach,
        OP_RELEASE: _op_release,
        OP_LOAD_LIBRARY: _op_load,
        OP_STATS: _op_stats,
        OP_STATS_EXT: _op_stats_ext,
        OP_SHUTDOWN: _op_shutdown,
        OP_PSS_RESET: _op_pss_reset,
        OP_BASELINE_STATFS: _op_baseline_statfs,
        OP_DOORBELL_STATFS: _op_doorbell_statfs,
        OP_RING_RECORD: _op_ring_record,
        OP_RING_DRAIN: _op_ring_drain,
        OP_PSS_FLUSH: _op_pss_flush,
    }


class _ConnState:
    __slots__ = ("task_id",)

    def __init__(self) -> None:
        self.task_id: int | None = None


def serve(socket_path: str, key: bytes, rng_seed: int | None = None) -> None:
    """Blocking service entry point; returns after a shutdown request."""
    KernelService(socket_path, key, rng_seed=rng_seed).serve_forever()


def spawn_service(socket_path: str, key: bytes,
                  rng_seed: int | None = None):
    """Start the service in a child process; caller owns the handle."""
    import multiprocessing

    ctx = multiprocessing.get_context("fork")
    proc = ctx.Process(target=serve, args=(socket_path, key, rng_seed),
                       daemon=True)
    proc.start()
    return proc
