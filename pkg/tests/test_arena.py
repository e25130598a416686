import struct

import pytest
from hypothesis import given, settings, strategies as st

from cmpi import arena as A
from cmpi.arena import Arena, HashGeometry, arena_format, prime_levels, read_header
from cmpi.device import DeviceConfig, device_open
from cmpi.errors import (
    ArenaError,
    GeometryMismatch,
    MetadataFull,
    NameExists,
    NotFound,
    ObjectRegionFull,
    RegionTooSmall,
)

# independent oracle for the documented hash: FNV-1a 64, then per-level splitmix64 finalizer
M64 = (1 << 64) - 1


def fnv1a(data):
    h = 14695981039346656037
    for b in data:
        h ^= b
        h = h * 1099511628211 % (1 << 64)
    return h


def bucket(name, level, primes):
    x = fnv1a(name.encode()) ^ ((level + 1) * 0x9E3779B97F4A7C15 & M64)
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & M64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & M64
    return (x ^ (x >> 31)) % primes[level]


def fresh(device_path, primes, capacity=1 << 20, mode="coherent"):
    r = device_open(DeviceConfig(device_path, capacity, mode))
    arena_format(r, HashGeometry(primes))
    return r, Arena(r)


def test_fnv_vectors():
    # published FNV-1a 64 test vectors
    assert A.name_hash(b"") == 0xCBF29CE484222325
    assert A.name_hash(b"a") == 0xAF63DC4C8601EC8C
    assert A.name_hash(b"foobar") == 0x85944171F73967E8
    assert fnv1a(b"foobar") == A.name_hash(b"foobar")


def test_prime_levels_examples():
    assert prime_levels(3, 1) == [3]
    assert prime_levels(10, 2) == [7, 5]
    with pytest.raises(ValueError):
        prime_levels(10, 5)
    with pytest.raises(ValueError):
        prime_levels(2, 1)


def test_geometry_validation():
    with pytest.raises(ArenaError):
        HashGeometry((7, 7))
    with pytest.raises(ArenaError):
        HashGeometry((9,))
    with pytest.raises(ArenaError):
        HashGeometry(())
    g = HashGeometry((7, 5))
    assert g.slot_total == 12 and g.level_base == [0, 7]


def test_default_layout_arithmetic():
    g = HashGeometry.default()
    meta_off, meta_len, obj_off, obj_len = A.layout_for(1 << 30, g)
    assert meta_off == 4096
    assert meta_len == 1_999_260 * 128
    assert obj_off == 4096 + 255_905_280
    assert obj_len == 817_832_448  # 2**30 - 4096 - 1,999,260 * 128, already a multiple of 64
    assert obj_len % 64 == 0


def test_format_1gib_default(device_path):
    with device_open(DeviceConfig(device_path)) as r:
        h = arena_format(r)
        assert h.objects_len == 817_832_448
        assert h.geometry.level_primes[0] == 199_999
        assert h.alloc_cursor == 0


def test_format_too_small(device_path):
    with device_open(DeviceConfig(device_path, 4096)) as r:
        with pytest.raises(RegionTooSmall):
            arena_format(r)


def test_reformat_is_idempotent(device_path):
    r, a = fresh(device_path, (7, 5))
    a.create("keep", 64)
    before = bytes(r.raw_view(0, 4096))
    arena_format(r, HashGeometry((7, 5)))
    assert bytes(r.raw_view(0, 4096)) == before
    assert a.exists("keep")
    with pytest.raises(GeometryMismatch):
        arena_format(r, HashGeometry((11, 7)))
    arena_format(r, HashGeometry((11, 7)), force=True)
    assert Arena(r).list() == []
    r.close()


def test_unformatted_device(device_path):
    with device_open(DeviceConfig(device_path, 1 << 20)) as r:
        with pytest.raises(ArenaError):
            read_header(r)


def test_create_open_unlink(arena):
    h = arena.create("w", 4096)
    assert (h.offset, h.size) == (0, 4096)
    assert arena.open("w") == h
    with pytest.raises(NameExists):
        arena.create("w", 64)
    assert arena.create("x", 100).size == 128
    arena.unlink("w")
    with pytest.raises(NotFound):
        arena.open("w")
    with pytest.raises(NotFound):
        arena.unlink("w")
    again = arena.create("w", 4096)
    assert again.offset == 4096 + 128  # old space is leaked by the bump allocator


def test_open_on_empty(arena):
    with pytest.raises(NotFound):
        arena.open("nothing")
    assert not arena.exists("nothing")


def test_names(arena):
    with pytest.raises(ArenaError):
        arena.create("", 64)
    with pytest.raises(ArenaError):
        arena.create("x" * 64, 64)
    with pytest.raises(ArenaError):
        arena.create("a\0b", 64)
    with pytest.raises(ArenaError):
        arena.create("ok", 0)
    h = arena.create("x" * 63, 64)
    assert arena.open("x" * 63) == h
    assert arena.stat("x" * 63).name == "x" * 63


def test_objects_are_zeroed(arena):
    h = arena.create("a", 256)
    arena.region.write_bytes(arena.address(h), b"\xff" * 256)
    arena.region.flush_range(arena.address(h), 256)
    arena.unlink("a")
    # a fresh arena over dirty bytes must still hand out zeroed objects
    r = arena.region
    arena_format(r, arena.geometry, force=True)
    a2 = Arena(r)
    h2 = a2.create("b", 256)
    assert r.read_bytes(a2.address(h2), 256, invalidate_first=True) == bytes(256)


def test_object_region_full(device_path):
    g = HashGeometry((7, 5))
    cap = 4096 + 12 * 128 + 1024
    r = device_open(DeviceConfig(device_path, cap))
    arena_format(r, g)
    a = Arena(r)
    a.create("a", 1000)
    with pytest.raises(ObjectRegionFull):
        a.create("b", 64)
    r.close()


def _collision_pair(primes):
    seen = {}
    i = 0
    while True:
        name = f"n{i}"
        b = bucket(name, 0, primes)
        if b in seen:
            return seen[b], name
        seen[b] = name
        i += 1


def test_level_one_collision_goes_deeper(device_path):
    g = HashGeometry.from_cap(200_000, 10)
    first, second = _collision_pair(g.level_primes)
    assert bucket(first, 0, g.level_primes) == bucket(second, 0, g.level_primes)
    with device_open(DeviceConfig(device_path, 300 << 20)) as r:
        arena_format(r, g)
        a = Arena(r)
        h1 = a.create(first, 64)
        h2 = a.create(second, 64)
        assert a.open(first) == h1 and a.open(second) == h2
        s1, s2 = a.stat(first), a.stat(second)
        assert (s1.level, s1.bucket) == (0, bucket(first, 0, g.level_primes))
        assert (s2.level, s2.bucket) == (1, bucket(second, 1, g.level_primes))


def test_capacity_matches_placement_model(device_path):
    """[7, 5]: fill every slot, checking each outcome against an occupancy model."""
    primes = (7, 5)
    r, a = fresh(device_path, primes)
    occupied = {}
    i = 0
    while len(occupied) < 12:
        name = f"k{i}"
        i += 1
        spot = next(
            ((lv, bucket(name, lv, primes)) for lv in range(2) if (lv, bucket(name, lv, primes)) not in occupied),
            None,
        )
        if spot is None:
            with pytest.raises(MetadataFull):
                a.create(name, 64)
            continue
        a.create(name, 64)
        occupied[spot] = name
    assert i < 10_000
    with pytest.raises(MetadataFull):
        a.create("one-too-many", 64)
    listed = {(s.level, s.bucket): s.name for s in a.list()}
    assert listed == occupied
    r.close()


def test_single_level_capacity(device_path):
    r, a = fresh(device_path, (7,))
    names, taken, i = [], set(), 0
    while len(taken) < 7:
        n = f"s{i}"
        i += 1
        b = bucket(n, 0, (7,))
        if b not in taken:
            taken.add(b)
            names.append(n)
            a.create(n, 64)
        else:
            with pytest.raises(MetadataFull):
                a.create(n, 64)
    assert len(a.list()) == 7
    r.close()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 40)), min_size=1, max_size=80))
def test_hash_placement_and_disjointness(tmp_path_factory, ops):
    """Random create/unlink traffic: slots obey the placement rule and live objects never overlap."""
    primes = (13, 11, 7)
    path = str(tmp_path_factory.mktemp("arena") / "dev")
    r, a = fresh(path, primes)
    occupied = {}
    for create, k in ops:
        name = f"obj{k}"
        if create:
            if name in occupied.values():
                with pytest.raises(NameExists):
                    a.create(name, 64 + k)
                continue
            chain = [(lv, bucket(name, lv, primes)) for lv in range(3)]
            free = [c for c in chain if c not in occupied]
            if not free:
                with pytest.raises(MetadataFull):
                    a.create(name, 64 + k)
                continue
            a.create(name, 64 + k)
            occupied[free[0]] = name
        elif name in occupied.values():
            a.unlink(name)
            occupied = {s: n for s, n in occupied.items() if n != name}
        else:
            with pytest.raises(NotFound):
                a.unlink(name)
    live = a.list()
    assert {(s.level, s.bucket): s.name for s in live} == occupied
    spans = sorted((s.offset, s.offset + s.size) for s in live)
    for (s0, e0), (s1, _) in zip(spans, spans[1:]):
        assert e0 <= s1
    assert all(s % 64 == 0 and e % 64 == 0 for s, e in spans)
    r.close()


def test_slot_bytes_follow_the_documented_layout(arena):
    h = arena.create("layout", 300)
    off = arena.slot_offset(h.slot_index)
    raw = bytes(arena.region.raw_view(off, 128))
    state, offset, size, hsh, nlen = struct.unpack_from("<QQQQQ", raw)
    assert state & 0xFF == A.USED and (state >> 8) & 0xFF == 0 and state >> 16 == 1
    assert (offset, size, nlen) == (0, 320, 6)
    assert hsh == fnv1a(b"layout")
    assert raw[64:70] == b"layout" and raw[70:] == bytes(58)
    head = bytes(arena.region.raw_view(0, 136))
    assert head[:8] == b"CMPIAR01"
    assert struct.unpack_from("<Q", head, 64)[0] == 320  # allocation cursor


def test_generation_survives_reuse(arena):
    h = arena.create("g", 64)
    off = arena.slot_offset(h.slot_index)
    arena.unlink("g")
    assert arena.region.nt_load_u64(off) == A.FREE | 1 << 16
    arena.create("g", 64)
    assert arena.region.nt_load_u64(off) == A.USED | 2 << 16


def test_shm_free_functions(arena):
    h = A.shm_create(arena, "p", 64)
    assert A.shm_open(arena, "p") == h
    A.shm_unlink(arena, "p")
    assert not arena.exists("p")


def test_two_attachments_incoherent(device_path):
    r0, a0 = fresh(device_path, (11, 7), mode="incoherent")
    r1 = device_open(DeviceConfig(device_path, 1 << 20, "incoherent"))
    a1 = Arena.attach(r1, timeout=1)
    h = a0.create("shared", 128)
    assert a1.open("shared") == h
    a1.unlink("shared")
    assert not a0.exists("shared")
    r0.close()
    r1.close()
