import pytest

from cmpi.arena import Arena, arena_format
from cmpi.device import DeviceConfig, device_open
from cmpi.errors import EpochError, RmaError
from cmpi.rma import win_allocate_shared
from cmpi.runtime import init
from cmpi.testing import run_ranks

from conftest import SMALL, SMALL_GEOMETRY


def test_layout_and_sizes(arena):
    win = win_allocate_shared(arena, "w", 1 << 20, 0, 4)
    assert win.handle.size == 4 << 20
    assert win.segment_offset(2) == arena.address(win.handle) + (2 << 20)
    with pytest.raises(RmaError):
        win.segment_offset(4)


def test_segment_rounds_to_cacheline(arena):
    win = win_allocate_shared(arena, "r", 100, 0, 3)
    assert win.seg_size == 128
    assert win.handle.size == 384


def test_single_rank_window(arena):
    win = win_allocate_shared(arena, "solo", 256, 0, 1)
    assert win.get(0, 0, 16) == bytes(16)
    win.put(0, 8, b"local copy")
    assert win.get(0, 8, 10) == b"local copy"
    out = bytearray(10)
    win.get_into(0, 8, out)
    assert out == b"local copy"


def test_bounds(arena):
    win = win_allocate_shared(arena, "b", 256, 0, 1)
    win.put(0, 0, bytes(256))
    with pytest.raises(RmaError):
        win.put(0, 1, bytes(256))
    with pytest.raises(RmaError):
        win.get(0, -1, 4)
    with pytest.raises(RmaError):
        win_allocate_shared(arena, "zero", 0, 0, 1)


def test_epoch_required_for_peers(arena):
    win = win_allocate_shared(arena, "e", 256, 0, 2)
    with pytest.raises(EpochError):
        win.put(1, 0, b"x")
    with pytest.raises(EpochError):
        win.get(1, 0, 1)
    win.lock(1)
    win.put(1, 0, b"x")
    win.unlock(1)
    loose = win_allocate_shared(arena, "loose", 256, 0, 2, strict=False)
    loose.put(1, 0, b"y")


def test_mismatched_segment_size(arena):
    win_allocate_shared(arena, "m", 256, 0, 2)
    with pytest.raises(RmaError):
        win_allocate_shared(arena, "m", 512, 1, 2, timeout=1)


def test_free_unlinks(arena):
    win = win_allocate_shared(arena, "f", 64, 0, 1)
    win.free()
    win.free()
    assert not arena.exists("win.f") and not arena.exists("win.f.sync")


def _two_origins(rank, nranks, path):
    ctx = init(rank, nranks, DeviceConfig(path, SMALL, "incoherent"), cell_size=4096, depth=4,
               geometry=SMALL_GEOMETRY, timeout=30)
    win = ctx.win_allocate("pair", 1024)
    peers = [win.segment_offset(r) for r in range(nranks)]
    result = None
    for epoch in range(10):
        if rank == 0:
            win.post([1, 2])
            win.wait()
            got = win.get(0, 0, 1024)
            expect = bytes([epoch + 1]) * 512 + bytes([epoch + 101]) * 512
            result = got == expect
            if not result:
                break
        else:
            win.start([0])
            win.put(0, (rank - 1) * 512, bytes([epoch + 1 + 100 * (rank - 1)]) * 512)
            win.complete()
    win.free()
    ctx.finalize()
    return peers, result


def test_two_origins_disjoint_ranges(device_path):
    res = run_ranks(3, _two_origins, device_path, timeout=120)
    assert res[0][1] is True
    assert res[0][0] == res[1][0] == res[2][0]  # same addresses everywhere


def _late_opener(rank, nranks, path):
    import time

    with device_open(DeviceConfig(path, SMALL)) as r:
        if rank == 0:
            arena_format(r, SMALL_GEOMETRY)
            time.sleep(0.3)
        a = Arena.attach(r, rank, nranks, timeout=10)
        w = win_allocate_shared(a, "late", 64, rank, nranks, timeout=10)
        return w.base


def test_open_waits_for_creator(device_path):
    bases = run_ranks(2, _late_opener, device_path, timeout=60)
    assert bases[0] == bases[1]
