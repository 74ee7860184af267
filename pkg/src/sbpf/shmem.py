"""Shared-segment lifetime, layout, and bounds-checked access.

The service process owns a manager that hands out one fixed-size named
shared-memory segment per task.  A segment is 1 MiB, split into three
fixed regions:

    [0, 512 KiB)        per-thread argument/return slot pool
    [512 KiB, 768 KiB)  perceptron model region
    [768 KiB, 1 MiB)    single-producer single-consumer ring region

Disclosure of a segment to the user side happens through a random
64-bit base handle, not an address: user code names bytes by
handle-relative offsets in [0, size) and can only build an accessor once
the service has revealed the handle after a successful library load.
"""

from __future__ import annotations

import random
import secrets
import threading
import uuid
from dataclasses import dataclass, field
from multiprocessing import resource_tracker, shared_memory

from .errors import AlreadyAllocated, InvalidThread, NotFound, OutOfMemory, ShmemError

SEG_SIZE = 1 << 20

THREAD_POOL_BASE = 0
THREAD_POOL_SIZE = 512 << 10
PSS_BASE = THREAD_POOL_BASE + THREAD_POOL_SIZE
PSS_SIZE = 256 << 10
RING_BASE = PSS_BASE + PSS_SIZE
RING_SIZE = SEG_SIZE - RING_BASE

assert RING_SIZE == 256 << 10


@dataclass(frozen=True)
class ThreadSlotLayout:
    """Fixed per-thread argument and return windows inside the pool."""

    pool_base: int = THREAD_POOL_BASE
    args_size: int = 4096
    ret_size: int = 4096
    max_threads: int = 64

    def args_offset(self, thread_id: int) -> int:
        if not 0 <= thread_id < self.max_threads:
            raise InvalidThread(f"thread {thread_id} outside 0..{self.max_threads - 1}")
        return self.pool_base + thread_id * (self.args_size + self.ret_size)

    def ret_offset(self, thread_id: int) -> int:
        return self.args_offset(thread_id) + self.args_size


DEFAULT_LAYOUT = ThreadSlotLayout()
assert DEFAULT_LAYOUT.ret_offset(DEFAULT_LAYOUT.max_threads - 1) \
    + DEFAULT_LAYOUT.ret_size <= THREAD_POOL_BASE + THREAD_POOL_SIZE


class SharedSegment:
    """Service-side record of one task's segment."""

    def __init__(self, task_id: int, backing: shared_memory.SharedMemory,
                 base_handle: int, size: int = SEG_SIZE) -> None:
        self.task_id = task_id
        self.size = size
        self.backing = backing
        self.base_handle = base_handle

    @property
    def name(self) -> str:
        return self.backing.name

    @property
    def buf(self) -> memoryview:
        return self.backing.buf

    def destroy(self) -> None:
        self.backing.close()
        try:
            self.backing.unlink()
        except FileNotFoundError:
            pass


@dataclass
class ManagerState:
    """One live segment per task, keyed by task ID."""

    rng_seed: int | None = None
    session: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    table: dict[int, SharedSegment] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seed = self.rng_seed if self.rng_seed is not None \
            else secrets.randbits(64)
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    def segment_name(self, task_id: int) -> str:
        return f"sbpf-{self.session}-{task_id}"

    def allocate(self, task_id: int) -> SharedSegment:
        with self._lock:
            if task_id in self.table:
                raise AlreadyAllocated(f"task {task_id} already holds a segment")
            name = self.segment_name(task_id)
            try:
                backing = shared_memory.SharedMemory(
                    name=name, create=True, size=SEG_SIZE)
            except FileExistsError:
                # stale object from a dead run; reclaim the name once
                try:
                    shared_memory.SharedMemory(name=name).unlink()
                    backing = shared_memory.SharedMemory(
                        name=name, create=True, size=SEG_SIZE)
                except OSError as exc:
                    raise OutOfMemory(f"cannot create segment {name}: {exc}") from exc
            except OSError as exc:
                raise OutOfMemory(f"cannot create segment {name}: {exc}") from exc
            segment = SharedSegment(task_id, backing, self._rng.getrandbits(64))
            self.table[task_id] = segment
            return segment

    def lookup(self, task_id: int) -> SharedSegment:
        with self._lock:
            segment = self.table.get(task_id)
            if segment is None:
                raise NotFound(f"task {task_id} holds no segment")
            return segment

    def release(self, task_id: int) -> None:
        with self._lock:
            segment = self.table.pop(task_id, None)
            if segment is None:
                raise NotFound(f"task {task_id} holds no segment")
            segment.destroy()

    def release_all(self) -> None:
        with self._lock:
            for segment in self.table.values():
                segment.destroy()
            self.table.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self.table)


_attach_lock = threading.Lock()


def attach_segment(name: str) -> shared_memory.SharedMemory:
    """Attach to a segment another process owns.

    On this Python version the constructor registers even a plain attach
    with the resource tracker, whose exit-time cleanup would unlink the
    owner's live object.  Opening with registration suppressed keeps
    destruction solely with the owner (the keyword for this arrived in a
    later Python).
    """
    with _attach_lock:
        original = resource_tracker.register
        resource_tracker.register = lambda *args, **kwargs: None
        try:
            return shared_memory.SharedMemory(name=name)
        finally:
            resource_tracker.register = original


class SegmentAccess:
    """Bounds-checked byte access to a mapped segment.

    Construction requires the base handle disclosed by the service; all
    offsets are handle-relative, i.e. plain indices in [0, size).
    """

    def __init__(self, buf: memoryview | bytearray, base_handle: int,
                 size: int | None = None) -> None:
        if base_handle is None:
            raise ShmemError("segment access requires the disclosed base handle")
        self.buf = buf
        self.base_handle = base_handle
        self.size = len(buf) if size is None else size

    def _check(self, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > self.size:
            raise ShmemError(
                f"access [{offset}, {offset + length}) outside segment "
                f"of {self.size} bytes")

    def read_u64(self, offset: int) -> int:
        self._check(offset, 8)
        return int.from_bytes(self.buf[offset:offset + 8], "little")

    def write_u64(self, offset: int, value: int) -> None:
        self._check(offset, 8)
        self.buf[offset:offset + 8] = (value & (2**64 - 1)).to_bytes(8, "little")

    def read_bytes(self, offset: int, length: int) -> bytes:
        self._check(offset, length)
        return bytes(self.buf[offset:offset + length])

    def write_bytes(self, offset: int, data: bytes) -> None:
        self._check(offset, len(data))
        self.buf[offset:offset + len(data)] = data
