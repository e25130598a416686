import pytest
from hypothesis import given, settings, strategies as st

from cmpi.device import CACHELINE, COHERENT, INCOHERENT, DeviceConfig, device_open
from cmpi.errors import DeviceError

from conftest import SMALL


def two(path, mode):
    cfg = DeviceConfig(path, SMALL, mode)
    return device_open(cfg), device_open(cfg)


def test_open_creates_zero_filled_file(device_path):
    with device_open(DeviceConfig(device_path, SMALL)) as r:
        assert r.length == SMALL
        assert r.read_bytes(12345, 16) == bytes(16)
        assert r.nt_load_u64(4096) == 0


def test_capacity_must_be_cacheline_multiple(device_path):
    with pytest.raises(DeviceError):
        DeviceConfig(device_path, 1000)


def test_cacheline_fixed_and_mode_checked(device_path):
    with pytest.raises(DeviceError):
        DeviceConfig(device_path, SMALL, cacheline=128)
    with pytest.raises(DeviceError):
        DeviceConfig(device_path, SMALL, mode="sometimes")


def test_existing_file_too_small(device_path):
    with open(device_path, "wb") as fh:
        fh.truncate(4096)
    with pytest.raises(DeviceError):
        device_open(DeviceConfig(device_path, SMALL))


def test_unwritable_path():
    with pytest.raises(DeviceError):
        device_open(DeviceConfig("/proc/definitely/not/here.img", SMALL))


def test_read_own_write(region):
    region.write_bytes(4096, b"abcdefgh")
    assert region.read_bytes(4096, 8) == b"abcdefgh"
    assert region.read_bytes(4096, 0) == b""


def test_out_of_bounds(region):
    with pytest.raises(DeviceError):
        region.write_bytes(SMALL - 4, b"12345678")
    with pytest.raises(DeviceError):
        region.read_bytes(SMALL, 1)
    with pytest.raises(DeviceError):
        region.flush_range(-64, 64)
    with pytest.raises(DeviceError):
        region.nt_store_u64(SMALL, 1)


def test_nt_misaligned(region):
    with pytest.raises(DeviceError):
        region.nt_store_u64(12, 7)
    with pytest.raises(DeviceError):
        region.nt_load_u64(12)


def test_byte_written_by_one_attachment_seen_by_other(device_path, mode):
    a, b = two(device_path, mode)
    a.write_bytes(0, b"\x5a")
    a.flush_range(0, 1)
    a.fence()
    b.fence()
    assert b.read_bytes(0, 1, invalidate_first=True) == b"\x5a"


def test_unflushed_write_is_invisible_when_incoherent(device_path):
    a, b = two(device_path, INCOHERENT)
    a.write_bytes(256, b"new!")
    assert b.read_bytes(256, 4, invalidate_first=True) == bytes(4)
    assert a.dirty_lines() == 1
    a.flush_range(256, 4)
    assert a.dirty_lines() == 0
    assert b.read_bytes(256, 4, invalidate_first=True) == b"new!"


def test_coherent_write_visible_without_flush(device_path):
    a, b = two(device_path, COHERENT)
    a.write_bytes(256, b"new!")
    assert b.read_bytes(256, 4) == b"new!"


def test_stale_read_without_invalidate(device_path):
    a, b = two(device_path, INCOHERENT)
    assert b.read_bytes(640, 4) == bytes(4)  # line now cached by b
    a.write_bytes(640, b"v2v2")
    a.flush_range(640, 4)
    assert b.read_bytes(640, 4) == bytes(4)
    assert b.read_bytes(640, 4, invalidate_first=True) == b"v2v2"


def test_flush_exact_line(device_path):
    a, b = two(device_path, INCOHERENT)
    a.write_bytes(128, b"x" * 64)
    a.write_bytes(192, b"y" * 64)
    a.flush_range(128, 64)
    assert bytes(b.raw_view(128, 64)) == b"x" * 64
    assert bytes(b.raw_view(192, 64)) == bytes(64)


def test_flush_clean_range_is_noop(region):
    region.flush_range(0, 4096)
    region.flush_range(0, 0)
    assert region.read_bytes(0, 8) == bytes(8)


def test_flush_everything(device_path):
    a, b = two(device_path, INCOHERENT)
    for off in range(0, SMALL, SMALL // 37 // CACHELINE * CACHELINE):
        a.write_bytes(off + 3, b"zz")
    assert a.dirty_lines() > 30
    a.flush_range(0, SMALL)
    assert a.dirty_lines() == 0
    assert b.read_bytes(3, 2, invalidate_first=True) == b"zz"


def test_partial_line_write_keeps_neighbours(device_path):
    a, b = two(device_path, INCOHERENT)
    b.write_bytes(1024, b"B" * 64)
    b.flush_range(1024, 64)
    a.write_bytes(1030, b"aa")
    a.flush_range(1024, 64)
    assert b.read_bytes(1024, 8, invalidate_first=True) == b"BBBBBBaa"


def test_partial_write_does_not_resurrect_stale_neighbours(device_path):
    a, b = two(device_path, INCOHERENT)
    b.read_bytes(2048, 64, invalidate_first=True)  # b now holds a clean copy of the line
    a.write_bytes(2048, b"A" * 8)
    a.flush_range(2048, 8)
    b.write_bytes(2048 + 32, b"B" * 8)
    b.flush_range(2048 + 32, 8)
    line = a.read_bytes(2048, 64, invalidate_first=True)
    assert line[:8] == b"A" * 8 and line[32:40] == b"B" * 8


def test_nt_store_visible_immediately(device_path, mode):
    a, b = two(device_path, mode)
    a.nt_store_u64(64, 7)
    assert b.nt_load_u64(64) == 7
    a.nt_store_u64(64, (1 << 64) - 1)
    assert b.nt_load_u64(64) == (1 << 64) - 1


def test_nt_store_evicts_dirty_line_first(device_path):
    a, b = two(device_path, INCOHERENT)
    a.write_bytes(512, b"payload!")
    a.nt_store_u64(520, 99)
    assert b.read_bytes(512, 8, invalidate_first=True) == b"payload!"
    assert b.nt_load_u64(520) == 99
    assert a.read_bytes(520, 8) == (99).to_bytes(8, "little")


def test_read_into(region):
    region.write_bytes(300, bytes(range(50)))
    out = bytearray(50)
    assert region.read_into(300, out) == 50
    assert out == bytes(range(50))


def test_close_twice(device_path):
    r = device_open(DeviceConfig(device_path, SMALL, INCOHERENT))
    r.close()
    r.close()
    assert r.closed


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8191), st.binary(min_size=1, max_size=300)), max_size=20))
def test_incoherent_matches_coherent_for_a_single_rank(tmp_path_factory, writes):
    """One rank reading its own writes sees the same bytes in both modes."""
    d = tmp_path_factory.mktemp("dev")
    regions = [device_open(DeviceConfig(str(d / m), 16384, m)) for m in (COHERENT, INCOHERENT)]
    for off, data in writes:
        for r in regions:
            r.write_bytes(off, data[: 16384 - off])
    views = [r.read_bytes(0, 16384) for r in regions]
    regions[1].flush_range(0, 16384)
    assert views[0] == views[1] == bytes(regions[1].raw_view(0, 16384))
    for r in regions:
        r.close()
