"""Shared-object arena on top of a ``DeviceRegion``.

The device is split into a 4 KiB header, a metadata region of fixed
128-byte slots indexed by a multi-level hash, and an object region served
by a bump allocator.  Names are looked up level by level; each level has
a distinct prime bucket count and exactly one slot per bucket.

The byte-exact layout is documented in ``docs/arena-format.md``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._spin import Backoff
from .device import CACHELINE, DeviceRegion
from .errors import (
    ArenaError,
    GeometryMismatch,
    MetadataFull,
    NameExists,
    NotFound,
    ObjectRegionFull,
    RegionTooSmall,
)
from .sync import BakeryLock

MAGIC = int.from_bytes(b"CMPIAR01", "little")
HEADER_LEN = 4096
SLOT_SIZE = 128
MAX_LEVELS = 32
MAX_NAME = 63
LOCK_RANKS = 32

# header word offsets
H_MAGIC = 0
H_HEADER_LEN = 8
H_LEVELS = 16
H_SLOT_SIZE = 24
H_META_OFF = 32
H_META_LEN = 40
H_OBJ_OFF = 48
H_OBJ_LEN = 56
H_CURSOR = 64
H_PRIMES = 128
H_LOCK = 1024

# slot field offsets
S_STATE = 0
S_OFFSET = 8
S_SIZE = 16
S_HASH = 24
S_NAME_LEN = 32
S_NAME = 64

FREE = 0
CLAIMING = 1
USED = 2

# state word: bits 0-7 state, 8-15 owner rank, 16-63 generation (bumped on every publish)
_GEN_SHIFT = 16
_GEN_MASK = (1 << 48) - 1


def _owner(word):
    return (word >> 8) & 0xFF


def _gen(word):
    return word >> _GEN_SHIFT


_MASK = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_GOLDEN = 0x9E3779B97F4A7C15

_BODY = struct.Struct("<QQQQ")  # offset, size, hash, name_len


def prime_levels(cap: int, levels: int) -> list[int]:
    """The ``levels`` largest primes <= ``cap``, descending."""
    if cap < 3 or levels < 1:
        raise ValueError("need cap >= 3 and levels >= 1")
    sieve = np.ones(cap + 1, dtype=bool)
    sieve[:2] = False
    for p in range(2, int(cap**0.5) + 1):
        if sieve[p]:
            sieve[p * p :: p] = False
    primes = np.flatnonzero(sieve)[::-1][:levels]
    if primes.size < levels:
        raise ValueError(f"only {primes.size} primes <= {cap}, need {levels}")
    return [int(p) for p in primes]


@dataclass(frozen=True)
class HashGeometry:
    level_primes: tuple

    def __post_init__(self):
        primes = tuple(int(p) for p in self.level_primes)
        object.__setattr__(self, "level_primes", primes)
        if not 1 <= len(primes) <= MAX_LEVELS:
            raise ArenaError(f"geometry needs 1..{MAX_LEVELS} levels")
        if len(set(primes)) != len(primes):
            raise ArenaError("level bucket counts must be distinct")
        for p in primes:
            if p < 2 or any(p % d == 0 for d in range(2, int(p**0.5) + 1)):
                raise ArenaError(f"level bucket count {p} is not prime")

    @classmethod
    def default(cls):
        return cls(tuple(prime_levels(200_000, 10)))

    @classmethod
    def from_cap(cls, cap, levels):
        return cls(tuple(prime_levels(cap, levels)))

    @property
    def levels(self):
        return len(self.level_primes)

    @property
    def slot_total(self):
        return sum(self.level_primes)

    @property
    def level_base(self):
        base, out = 0, []
        for p in self.level_primes:
            out.append(base)
            base += p
        return out


def name_hash(name: bytes) -> int:
    """64-bit FNV-1a of the object name."""
    h = _FNV_OFFSET
    for b in name:
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h


def level_hash(h: int, level: int) -> int:
    """Re-seed the name hash for ``level`` (xor with a level constant, then splitmix64 finalizer)."""
    x = (h ^ (((level + 1) * _GOLDEN) & _MASK)) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def round_up(n, to=CACHELINE):
    return (n + to - 1) // to * to


@dataclass(frozen=True)
class ArenaHeader:
    magic: int
    geometry: HashGeometry
    metadata_off: int
    metadata_len: int
    objects_off: int
    objects_len: int
    alloc_cursor: int


@dataclass(frozen=True)
class ObjHandle:
    slot_index: int
    offset: int
    size: int


@dataclass(frozen=True)
class SlotInfo:
    name: str
    slot_index: int
    level: int
    bucket: int
    offset: int
    size: int
    owner: int


def layout_for(capacity: int, geometry: HashGeometry):
    """(metadata_off, metadata_len, objects_off, objects_len) for a device of ``capacity`` bytes."""
    meta_off = HEADER_LEN
    meta_len = geometry.slot_total * SLOT_SIZE
    obj_off = meta_off + meta_len
    obj_len = (capacity - obj_off) // CACHELINE * CACHELINE
    if obj_len < CACHELINE:
        raise RegionTooSmall(
            f"device of {capacity} bytes cannot hold {geometry.slot_total} slots plus objects"
        )
    return meta_off, meta_len, obj_off, obj_len


def _read_geometry(region):
    levels = region.nt_load_u64(H_LEVELS)
    if not 1 <= levels <= MAX_LEVELS:
        raise ArenaError(f"corrupt arena header: {levels} levels")
    return HashGeometry(tuple(region.nt_load_u64(H_PRIMES + 8 * i) for i in range(levels)))


def read_header(region: DeviceRegion) -> ArenaHeader:
    magic = region.nt_load_u64(H_MAGIC)
    if magic != MAGIC:
        raise ArenaError("device is not formatted")
    return ArenaHeader(
        magic=magic,
        geometry=_read_geometry(region),
        metadata_off=region.nt_load_u64(H_META_OFF),
        metadata_len=region.nt_load_u64(H_META_LEN),
        objects_off=region.nt_load_u64(H_OBJ_OFF),
        objects_len=region.nt_load_u64(H_OBJ_LEN),
        alloc_cursor=region.nt_load_u64(H_CURSOR),
    )


def arena_format(region: DeviceRegion, geometry: HashGeometry | None = None, force=False) -> ArenaHeader:
    """Write a fresh arena, or validate an existing one with the same geometry.

    ``force`` wipes an existing arena (header, slots and allocation cursor).
    """
    geometry = geometry or HashGeometry.default()
    meta_off, meta_len, obj_off, obj_len = layout_for(region.length, geometry)
    if not force and region.nt_load_u64(H_MAGIC) == MAGIC:
        existing = _read_geometry(region)
        if existing != geometry:
            raise GeometryMismatch(
                f"arena formatted with {existing.level_primes}, requested {geometry.level_primes}"
            )
        return read_header(region)

    # write back and drop any cached lines, then zero header and slots in place
    region.flush_range(0, obj_off)
    region.nt_store_u64(H_MAGIC, 0)
    region.fence()
    for start in range(0, obj_off, 1 << 26):
        words = region.raw_u64(start, min(1 << 26, obj_off - start) // 8)
        if words.any():
            words[:] = 0
        del words

    head = struct.pack(
        "<QQQQQQQQ", 0, HEADER_LEN, geometry.levels, SLOT_SIZE, meta_off, meta_len, obj_off, obj_len
    )
    region.write_bytes(0, head)
    region.write_bytes(H_PRIMES, struct.pack(f"<{geometry.levels}Q", *geometry.level_primes))
    region.flush_range(0, HEADER_LEN)
    region.nt_store_u64(H_CURSOR, 0)
    region.fence()
    region.nt_store_u64(H_MAGIC, MAGIC)
    region.fence()
    return read_header(region)


def wait_formatted(region: DeviceRegion, timeout=30.0) -> ArenaHeader:
    backoff = Backoff(timeout, "arena format")
    while region.nt_load_u64(H_MAGIC) != MAGIC:
        backoff.pause()
    return read_header(region)


class Arena:
    """A rank's handle on a formatted arena.

    With ``nranks > 1`` every create and unlink runs under a bakery lock
    stored in the arena header, which serializes the allocation cursor.
    """

    def __init__(self, region: DeviceRegion, rank=0, nranks=1, timeout=None):
        if not 0 <= rank < nranks:
            raise ArenaError(f"rank {rank} outside {nranks} ranks")
        if nranks > LOCK_RANKS:
            raise ArenaError(f"arena lock supports at most {LOCK_RANKS} ranks")
        self.region = region
        self.rank = rank
        self.nranks = nranks
        self.header = read_header(region)
        self.geometry = self.header.geometry
        self._primes = self.geometry.level_primes
        self._level_base = self.geometry.level_base
        self._meta_off = self.header.metadata_off
        self._obj_off = self.header.objects_off
        self._obj_len = self.header.objects_len
        self._lock = BakeryLock(region, H_LOCK, nranks, rank, timeout=timeout)

    @classmethod
    def attach(cls, region, rank=0, nranks=1, timeout=30.0):
        wait_formatted(region, timeout)
        return cls(region, rank, nranks, timeout=timeout)

    # -- addressing ------------------------------------------------------

    @property
    def objects_off(self):
        return self._obj_off

    @property
    def alloc_cursor(self):
        return self.region.nt_load_u64(H_CURSOR)

    def address(self, handle: ObjHandle) -> int:
        """Device offset of the first byte of ``handle``'s object."""
        return self._obj_off + handle.offset

    def slot_offset(self, slot_index):
        return self._meta_off + slot_index * SLOT_SIZE

    def bucket_of(self, name, level):
        key = _encode(name)
        return level_hash(name_hash(key), level) % self._primes[level]

    def slot_location(self, slot_index):
        """(level, bucket) of a flattened slot index."""
        for level in range(len(self._primes) - 1, -1, -1):
            if slot_index >= self._level_base[level]:
                return level, slot_index - self._level_base[level]
        raise ArenaError(f"slot {slot_index} out of range")

    # -- lookup ----------------------------------------------------------

    def _find(self, key, h):
        region = self.region
        load = region.nt_load_u64
        for level, prime in enumerate(self._primes):
            idx = self._level_base[level] + level_hash(h, level) % prime
            off = self._meta_off + idx * SLOT_SIZE
            while True:
                state = load(off + S_STATE)
                if state & 0xFF != USED or load(off + S_HASH) != h:
                    break
                region.fence()
                slot = region.read_bytes(off, SLOT_SIZE, invalidate_first=True)
                region.fence()
                # the slot may have been unlinked and reused while we copied it
                if load(off + S_STATE) != state:
                    continue
                offset, size, _, nlen = _BODY.unpack_from(slot, S_OFFSET)
                if slot[S_NAME : S_NAME + nlen] == key:
                    return idx, offset, size
                break
        return None

    def open(self, name) -> ObjHandle:
        key = _encode(name)
        hit = self._find(key, name_hash(key))
        if hit is None:
            raise NotFound(f"no shared object named {name!r}")
        return ObjHandle(*hit)

    def open_wait(self, name, timeout=30.0) -> ObjHandle:
        """Open ``name``, spinning until some rank has created it."""
        key = _encode(name)
        h = name_hash(key)
        backoff = Backoff(timeout, f"object {name!r}")
        while True:
            hit = self._find(key, h)
            if hit is not None:
                return ObjHandle(*hit)
            backoff.pause()

    def exists(self, name) -> bool:
        key = _encode(name)
        return self._find(key, name_hash(key)) is not None

    # -- create / unlink ---------------------------------------------------

    def _locked(self):
        return self._lock if self.nranks > 1 else _NullLock

    def create(self, name, size: int) -> ObjHandle:
        key = _encode(name)
        if size <= 0:
            raise ArenaError("object size must be positive")
        size = round_up(size)
        h = name_hash(key)
        with self._locked():
            if self._find(key, h) is not None:
                raise NameExists(f"shared object {name!r} already exists")
            cursor = self.region.nt_load_u64(H_CURSOR)
            if cursor + size > self._obj_len:
                raise ObjectRegionFull(
                    f"{size} bytes requested, {self._obj_len - cursor} left in object region"
                )
            idx, gen = self._claim(h)
            off = self._meta_off + idx * SLOT_SIZE
            body = bytearray(SLOT_SIZE - S_OFFSET)
            _BODY.pack_into(body, 0, cursor, size, h, len(key))
            body[S_NAME - S_OFFSET : S_NAME - S_OFFSET + len(key)] = key
            self.region.write_bytes(off + S_OFFSET, body)
            self.region.flush_range(off, SLOT_SIZE)
            self._zero(self._obj_off + cursor, size)
            self.region.fence()
            self.region.nt_store_u64(H_CURSOR, cursor + size)
            self.region.fence()
            gen = (gen + 1) & _GEN_MASK
            self.region.nt_store_u64(off + S_STATE, USED | (self.rank << 8) | (gen << _GEN_SHIFT))
            self.region.fence()
        return ObjHandle(idx, cursor, size)

    def _claim(self, h):
        """Take the first FREE bucket along the level chain; returns (slot, generation).

        The claim word carries our rank; if a peer's claim replaced ours the
        lower rank keeps the slot and we move one level deeper.
        """
        region = self.region
        for level, prime in enumerate(self._primes):
            idx = self._level_base[level] + level_hash(h, level) % prime
            off = self._meta_off + idx * SLOT_SIZE
            word = region.nt_load_u64(off + S_STATE)
            if word & 0xFF != FREE:
                continue
            gen = _gen(word)
            mine = CLAIMING | (self.rank << 8) | (gen << _GEN_SHIFT)
            region.nt_store_u64(off + S_STATE, mine)
            region.fence()
            seen = region.nt_load_u64(off + S_STATE)
            if seen != mine:
                if seen & 0xFF != CLAIMING or _owner(seen) < self.rank:
                    continue
                region.nt_store_u64(off + S_STATE, mine)
                region.fence()
            return idx, gen
        raise MetadataFull("every bucket on the level chain of this name is taken")

    def _zero(self, dev_off, size):
        chunk = bytes(min(size, 1 << 22))
        pos = 0
        while pos < size:
            n = min(len(chunk), size - pos)
            self.region.write_bytes(dev_off + pos, chunk[:n] if n < len(chunk) else chunk)
            self.region.flush_range(dev_off + pos, n)
            pos += n

    def unlink(self, name) -> None:
        key = _encode(name)
        with self._locked():
            hit = self._find(key, name_hash(key))
            if hit is None:
                raise NotFound(f"no shared object named {name!r}")
            off = self._meta_off + hit[0] * SLOT_SIZE
            gen = _gen(self.region.nt_load_u64(off + S_STATE))
            self.region.fence()
            self.region.nt_store_u64(off + S_STATE, FREE | (gen << _GEN_SHIFT))
            self.region.fence()

    # -- inspection --------------------------------------------------------

    def _info(self, idx, slot):
        state = struct.unpack_from("<Q", slot, S_STATE)[0]
        offset, size, _, nlen = _BODY.unpack_from(slot, S_OFFSET)
        level, bucket = self.slot_location(idx)
        name = bytes(slot[S_NAME : S_NAME + nlen]).decode()
        return SlotInfo(name, idx, level, bucket, offset, size, _owner(state))

    def stat(self, name) -> SlotInfo:
        key = _encode(name)
        hit = self._find(key, name_hash(key))
        if hit is None:
            raise NotFound(f"no shared object named {name!r}")
        off = self._meta_off + hit[0] * SLOT_SIZE
        return self._info(hit[0], self.region.read_bytes(off, SLOT_SIZE, invalidate_first=True))

    def list(self) -> list[SlotInfo]:
        """Every USED slot, by slot index (a full scan of the metadata region)."""
        total = self.geometry.slot_total
        self.region.flush_range(self._meta_off, total * SLOT_SIZE)
        words = self.region.raw_u64(self._meta_off, total * (SLOT_SIZE // 8))
        used = np.flatnonzero((words[:: SLOT_SIZE // 8] & np.uint64(0xFF)) == USED).tolist()
        del words
        out = []
        for idx in used:
            off = self._meta_off + idx * SLOT_SIZE
            out.append(self._info(idx, self.region.read_bytes(off, SLOT_SIZE, invalidate_first=True)))
        return out


class _NullLockType:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        pass


_NullLock = _NullLockType()


def _encode(name) -> bytes:
    key = name.encode() if isinstance(name, str) else bytes(name)
    if not key:
        raise ArenaError("object name must be non-empty")
    if len(key) > MAX_NAME:
        raise ArenaError(f"object name longer than {MAX_NAME} bytes")
    if b"\0" in key:
        raise ArenaError("object name may not contain NUL")
    return key


# POSIX-flavoured free functions


def shm_create(arena: Arena, name, size) -> ObjHandle:
    return arena.create(name, size)


def shm_open(arena: Arena, name) -> ObjHandle:
    return arena.open(name)


def shm_unlink(arena: Arena, name) -> None:
    arena.unlink(name)

