"""Segment lifecycle, thread-slot layout math, and cross-process visibility."""

import itertools
import multiprocessing
import random

import pytest

from sbpf import shmem
from sbpf.errors import AlreadyAllocated, InvalidThread, NotFound, ShmemError


def test_region_partition_covers_segment():
    assert shmem.THREAD_POOL_BASE == 0
    assert shmem.THREAD_POOL_SIZE == 512 * 1024
    assert shmem.PSS_BASE == 512 * 1024
    assert shmem.RING_BASE == 768 * 1024
    assert shmem.RING_BASE + shmem.RING_SIZE == shmem.SEG_SIZE == 1024 * 1024


def test_slot_offsets_match_layout_formula():
    layout = shmem.ThreadSlotLayout()
    assert layout.args_offset(0) == 0
    assert layout.args_offset(3) == 24576
    assert layout.ret_offset(0) == 4096
    assert layout.ret_offset(3) == 28672
    with pytest.raises(InvalidThread):
        layout.args_offset(64)
    with pytest.raises(InvalidThread):
        layout.ret_offset(200)
    with pytest.raises(InvalidThread):
        layout.args_offset(-1)


def test_slot_windows_disjoint_and_inside_pool():
    layout = shmem.ThreadSlotLayout()
    spans = []
    for t in range(layout.max_threads):
        start = layout.args_offset(t)
        end = layout.ret_offset(t) + layout.ret_size
        assert 0 <= start < end <= shmem.THREAD_POOL_BASE + shmem.THREAD_POOL_SIZE
        spans.append((start, end))
    for (a1, e1), (a2, e2) in itertools.combinations(spans, 2):
        assert e1 <= a2 or e2 <= a1


def test_allocate_lookup_release_lifecycle():
    manager = shmem.ManagerState(rng_seed=7)
    try:
        segment = manager.allocate(42)
        assert manager.lookup(42) is segment
        assert segment.size == shmem.SEG_SIZE
        assert bytes(segment.buf[:4096]) == bytes(4096)
        assert bytes(segment.buf[-4096:]) == bytes(4096)

        with pytest.raises(AlreadyAllocated):
            manager.allocate(42)

        manager.release(42)
        with pytest.raises(NotFound):
            manager.lookup(42)
        with pytest.raises(NotFound):
            manager.release(42)
    finally:
        manager.release_all()


def test_reallocation_gets_fresh_handle():
    manager = shmem.ManagerState(rng_seed=7)
    try:
        first = manager.allocate(7).base_handle
        manager.release(7)
        second = manager.allocate(7).base_handle
        assert first != second
    finally:
        manager.release_all()


def test_distinct_seeds_give_distinct_handles():
    a = shmem.ManagerState(rng_seed=1)
    b = shmem.ManagerState(rng_seed=2)
    try:
        assert a.allocate(1).base_handle != b.allocate(1).base_handle
    finally:
        a.release_all()
        b.release_all()


def test_table_size_tracks_outstanding_allocations():
    manager = shmem.ManagerState(rng_seed=5)
    rng = random.Random(5)
    live = set()
    try:
        for _ in range(200):
            task = rng.randrange(16)
            if task in live:
                if rng.random() < 0.5:
                    manager.release(task)
                    live.discard(task)
                else:
                    with pytest.raises(AlreadyAllocated):
                        manager.allocate(task)
            else:
                manager.allocate(task)
                live.add(task)
            assert len(manager) == len(live)
    finally:
        manager.release_all()


def _child_write(name: str, offset: int, payload: bytes) -> None:
    shm = shmem.attach_segment(name)
    try:
        shm.buf[offset:offset + len(payload)] = payload
    finally:
        shm.close()


def test_cross_process_write_is_visible_and_segment_survives_attacher():
    manager = shmem.ManagerState(rng_seed=11)
    try:
        segment = manager.allocate(3)
        proc = multiprocessing.Process(
            target=_child_write, args=(segment.name, 1000, b"hello-across"))
        proc.start()
        proc.join(timeout=30)
        assert proc.exitcode == 0
        assert bytes(segment.buf[1000:1012]) == b"hello-across"

        # the attacher's exit must not have destroyed the backing object
        again = shmem.attach_segment(segment.name)
        assert bytes(again.buf[1000:1012]) == b"hello-across"
        again.close()
    finally:
        manager.release_all()


def test_segment_access_bounds_and_handle_gate():
    buf = bytearray(64)
    with pytest.raises(ShmemError):
        shmem.SegmentAccess(buf, base_handle=None)

    access = shmem.SegmentAccess(buf, base_handle=0xABCDEF)
    access.write_u64(8, 0x1122334455667788)
    assert access.read_u64(8) == 0x1122334455667788
    access.write_bytes(0, b"zz")
    assert access.read_bytes(0, 2) == b"zz"

    for offset, length in ((57, 8), (-1, 8), (0, 65), (64, 1)):
        with pytest.raises(ShmemError):
            access.read_bytes(offset, length) if length != 8 \
                else access.read_u64(offset)
    with pytest.raises(ShmemError):
        access.write_bytes(63, b"ab")
