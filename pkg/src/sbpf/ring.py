"""Single-producer single-consumer ring over shared memory.

Layout inside the ring region (all little-endian):

    [0, 8)     tail cursor, written only by the producer
    [64, 72)   head cursor, written only by the consumer
    [128, ...) data area, a power-of-two number of bytes

Cursors are monotonic byte counts; the data index is cursor & (capacity
- 1), so full (tail - head == capacity) and empty (tail == head) are
never ambiguous.  The two cursors sit 64 bytes apart to keep them on
distinct cache lines.

Records are a 32-bit length followed by the payload, padded to 8-byte
alignment.  A record never wraps the end of the data area: when the
remainder to the end is too small the producer drops in a skip marker
(length with the high bit set, low bits holding the padded span) and
the record starts at index 0.  Cursor positions therefore stay 8-byte
aligned, so the marker word always fits.

Publication contract: the producer finishes all payload writes before
its single 8-byte tail store; the consumer finishes payload reads
before its single 8-byte head store.  Both cursor accesses are aligned
8-byte copies, which this interpreter performs as one memcpy; on x86-64
total-store ordering that yields the release/acquire edges the two
sides need.  No locks anywhere on the push/drain path.

One quantitative note: the ring region is 256 KiB and the header takes
128 bytes, so the largest power-of-two data area that fits is 128 KiB,
which is the default capacity.
"""

from __future__ import annotations

import struct

from .errors import RecordTooLarge

TAIL_OFF = 0
HEAD_OFF = 64
DATA_OFF = 128

DEFAULT_CAPACITY = 1 << 17

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_SKIP = 0x80000000

RECORD_HEADER = 4


def record_stride(payload_len: int) -> int:
    return (RECORD_HEADER + payload_len + 7) & ~7


class SpscRing:
    """One endpoint of the ring; a process may act as producer, consumer,
    or both (the roles touch disjoint state)."""

    def __init__(self, buf, base: int = 0,
                 capacity: int = DEFAULT_CAPACITY, reset: bool = False) -> None:
        if capacity & (capacity - 1) or capacity < 8:
            raise ValueError(f"capacity {capacity} is not a power of two")
        if hasattr(buf, "__len__") and base + DATA_OFF + capacity > len(buf):
            raise ValueError(f"capacity {capacity} does not fit the region")
        self.buf = buf
        self.base = base
        self.capacity = capacity
        self.mask = capacity - 1
        self.max_payload = capacity - 16
        if reset:
            self._store(TAIL_OFF, 0)
            self._store(HEAD_OFF, 0)
        self._tail = self._load(TAIL_OFF)
        self._head = self._load(HEAD_OFF)
        # producer-side cache of the consumer cursor; a stale value only
        # under-reports free space, so refreshing lazily is safe
        self._head_seen = self._head

    def _load(self, off: int) -> int:
        return _U64.unpack_from(self.buf, self.base + off)[0]

    def _store(self, off: int, value: int) -> None:
        _U64.pack_into(self.buf, self.base + off, value)

    def push(self, payload: bytes) -> bool:
        """Append one record; False means no room right now."""
        n = len(payload)
        if n < 1 or n > self.max_payload:
            raise RecordTooLarge(f"payload of {n} bytes outside 1..{self.max_payload}")
        stride = (RECORD_HEADER + n + 7) & ~7
        tail = self._tail
        capacity = self.capacity
        pos = tail & self.mask
        to_end = capacity - pos
        need = stride if stride <= to_end else to_end + stride
        if need > capacity - (tail - self._head_seen):
            self._head_seen = self._load(HEAD_OFF)
            if need > capacity - (tail - self._head_seen):
                return False
        buf = self.buf
        at = self.base + DATA_OFF + pos
        if stride > to_end:
            _U32.pack_into(buf, at, _SKIP | to_end)
            tail += to_end
            at = self.base + DATA_OFF
        _U32.pack_into(buf, at, n)
        buf[at + 4:at + 4 + n] = payload
        tail += stride
        _U64.pack_into(buf, self.base + TAIL_OFF, tail)
        self._tail = tail
        return True

    def drain_batch(self, max_records: int) -> list[bytes]:
        """Pop up to max_records payloads in FIFO order."""
        out: list[bytes] = []
        append = out.append
        head = self._head
        tail = self._load(TAIL_OFF)
        buf = self.buf
        data = self.base + DATA_OFF
        mask = self.mask
        unpack = _U32.unpack_from
        while max_records and head != tail:
            at = data + (head & mask)
            word = unpack(buf, at)[0]
            if word & _SKIP:
                head += word & ~_SKIP
                continue
            append(bytes(buf[at + 4:at + 4 + word]))
            head += (RECORD_HEADER + word + 7) & ~7
            max_records -= 1
        if head != self._head:
            self._store(HEAD_OFF, head)
            self._head = head
        return out

    def occupancy(self) -> int:
        """tail - head as observable from shared state."""
        return self._load(TAIL_OFF) - self._load(HEAD_OFF)

    def __len__(self) -> int:
        return self.occupancy()


def baseline_drain_one(channel, payload: bytes) -> None:
    """Ship one record through the copy-based boundary channel; the
    service runs its per-record drain callback.  Data flows one way,
    mirroring the producer-to-consumer direction of the shared ring."""
    channel.ring_record(payload)
