"""Emulated pooled-memory device.

A ``DeviceRegion`` maps one zero-filled backing file shared by every rank.
In ``coherent`` mode plain reads and writes go straight to the shared
mapping.  In ``incoherent`` mode each process keeps a private write-back
cache of 64-byte lines (the *overlay*): writes stay private until
``flush_range`` and reads may return stale lines unless the caller
invalidates first.  This makes a missing flush or invalidate observable
as a wrong value on the peer, which is the whole point of the mode.

Integer words used for flags and ring indices go through ``nt_store_u64``
/ ``nt_load_u64``, which always hit the backing mapping.
"""

from __future__ import annotations

import mmap
import os
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DeviceError

CACHELINE = 64
_LINE_SHIFT = 6
DEFAULT_CAPACITY = 1 << 30

COHERENT = "coherent"
INCOHERENT = "incoherent"

# overlay line states
_ABSENT = 0
_CLEAN = 1
_DIRTY = 2
_SHORT = 64
_FILL = {v: bytes([v]) * _SHORT for v in (_ABSENT, _CLEAN, _DIRTY)}


@dataclass(frozen=True)
class DeviceConfig:
    backing_path: str
    capacity: int = DEFAULT_CAPACITY
    mode: str = COHERENT
    cacheline: int = CACHELINE

    def __post_init__(self):
        if self.cacheline != CACHELINE:
            raise DeviceError(f"cacheline is fixed at {CACHELINE} bytes")
        if self.capacity <= 0 or self.capacity % CACHELINE:
            raise DeviceError(
                f"capacity {self.capacity} is not a positive multiple of {CACHELINE}"
            )
        if self.mode not in (COHERENT, INCOHERENT):
            raise DeviceError(f"unknown device mode {self.mode!r}")

    @property
    def incoherent(self) -> bool:
        return self.mode == INCOHERENT


def _runs(mask):
    """(start, stop) index pairs of the True runs in a 1-d boolean array."""
    if mask.all():
        return [(0, mask.size)]
    edges = np.flatnonzero(np.diff(np.concatenate(([0], mask.view(np.int8), [0]))))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def _as_bytes_view(data) -> memoryview:
    mv = memoryview(data)
    if mv.format != "B" or mv.ndim != 1:
        mv = mv.cast("B")
    return mv


class DeviceRegion:
    """One process's attachment to the shared device."""

    def __init__(self, config: DeviceConfig):
        self.config = config
        self.length = config.capacity
        try:
            fd = os.open(config.backing_path, os.O_RDWR | os.O_CREAT, 0o644)
        except OSError as exc:
            raise DeviceError(f"cannot open {config.backing_path}: {exc}") from exc
        try:
            size = os.fstat(fd).st_size
            if size == 0:
                os.ftruncate(fd, config.capacity)
            elif size < config.capacity:
                raise DeviceError(
                    f"{config.backing_path} holds {size} bytes, need {config.capacity}"
                )
            self._mm = mmap.mmap(fd, config.capacity, mmap.MAP_SHARED)
        finally:
            os.close(fd)
        self._view = memoryview(self._mm)
        self._words = self._view.cast("Q")
        # A lock round trip is a locked read-modify-write on x86, i.e. a full barrier.
        self._barrier = threading.Lock()
        self.incoherent = config.incoherent
        if self.incoherent:
            self._cache = mmap.mmap(-1, config.capacity)
            self._cview = memoryview(self._cache)
            self._state = bytearray(config.capacity >> _LINE_SHIFT)
            self._state_np = np.frombuffer(self._state, dtype=np.uint8)
        self.closed = False

    # -- lifecycle -------------------------------------------------------

    def close(self):
        if self.closed:
            return
        self.closed = True
        self._words.release()
        self._view.release()
        if self.incoherent:
            self._cview.release()
            del self._state_np
        try:
            self._mm.close()
            if self.incoherent:
                self._cache.close()
        except BufferError:
            # a raw numpy view is still alive; the mapping goes when it does
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- plain access ----------------------------------------------------

    def _check(self, offset, length):
        if offset < 0 or length < 0 or offset + length > self.length:
            raise DeviceError(
                f"access [{offset}, {offset + length}) outside device of {self.length} bytes"
            )

    def write_bytes(self, offset: int, data) -> None:
        mv = _as_bytes_view(data)
        n = mv.nbytes
        self._check(offset, n)
        if n == 0:
            return
        if not self.incoherent:
            self._mm[offset : offset + n] = mv
            return
        end = offset + n
        first = offset >> _LINE_SHIFT
        last = (end - 1) >> _LINE_SHIFT
        state = self._state
        # Partially covered edge lines are merged with a fresh copy of the line.
        # A clean copy may be stale; merging into it would write old neighbour
        # bytes back on flush even when every access follows the discipline.
        if offset & (CACHELINE - 1) and state[first] != _DIRTY:
            self._refresh(first)
        if end & (CACHELINE - 1) and state[last] != _DIRTY:
            self._refresh(last)
        self._cache[offset:end] = mv
        self._set_state(first, last + 1, _DIRTY)

    def read_bytes(self, offset: int, length: int, invalidate_first: bool = False) -> bytes:
        self._check(offset, length)
        if length == 0:
            return b""
        if not self.incoherent:
            return self._mm[offset : offset + length]
        if invalidate_first:
            self.flush_range(offset, length)
        self._fill(offset >> _LINE_SHIFT, ((offset + length - 1) >> _LINE_SHIFT) + 1)
        return self._cache[offset : offset + length]

    def read_into(self, offset: int, out, invalidate_first: bool = False) -> int:
        """Copy ``len(out)`` device bytes into the writable buffer ``out``."""
        mv = _as_bytes_view(out)
        n = mv.nbytes
        self._check(offset, n)
        if n == 0:
            return 0
        if not self.incoherent:
            mv[:] = self._view[offset : offset + n]
            return n
        if invalidate_first:
            self.flush_range(offset, n)
        self._fill(offset >> _LINE_SHIFT, ((offset + n - 1) >> _LINE_SHIFT) + 1)
        mv[:] = self._cview[offset : offset + n]
        return n

    # -- overlay bookkeeping ---------------------------------------------
    # Short ranges use bytearray methods (C loops, no numpy call overhead);
    # long ranges go through a numpy view of the same buffer.

    def _set_state(self, l0, l1, value):
        if l1 - l0 <= _SHORT:
            self._state[l0:l1] = _FILL[value][: l1 - l0]
        else:
            self._state_np[l0:l1] = value

    def _line_runs(self, l0, l1, value):
        """Runs of lines in [l0, l1) whose state equals ``value``, as absolute line numbers."""
        if l1 - l0 <= _SHORT:
            seg = self._state[l0:l1]
            if value not in seg:
                return ()
            if seg.count(value) == len(seg):
                return ((l0, l1),)
            runs, start = [], None
            for i, v in enumerate(seg):
                if v == value:
                    if start is None:
                        start = i
                elif start is not None:
                    runs.append((l0 + start, l0 + i))
                    start = None
            if start is not None:
                runs.append((l0 + start, l1))
            return runs
        mask = self._state_np[l0:l1] == value
        if not mask.any():
            return ()
        return [(l0 + s, l0 + e) for s, e in _runs(mask)]

    def _refresh(self, line):
        a = line << _LINE_SHIFT
        self._cview[a : a + CACHELINE] = self._view[a : a + CACHELINE]
        self._state[line] = _CLEAN

    def _fill(self, l0, l1):
        for a, b in self._line_runs(l0, l1, _ABSENT):
            a <<= _LINE_SHIFT
            b <<= _LINE_SHIFT
            self._cview[a:b] = self._view[a:b]
            self._set_state(a >> _LINE_SHIFT, b >> _LINE_SHIFT, _CLEAN)

    # -- coherence discipline --------------------------------------------

    def flush_range(self, offset: int, length: int) -> None:
        """Write back dirty lines intersecting the range and drop them from the overlay.

        Behaves like ``clflush``: clean lines are invalidated too, so the same
        call serves as the invalidate step before a read.
        """
        self._check(offset, length)
        if not self.incoherent or length == 0:
            return
        l0 = offset >> _LINE_SHIFT
        l1 = ((offset + length - 1) >> _LINE_SHIFT) + 1
        if l1 - l0 <= _SHORT:
            if self._state[l0:l1].count(_ABSENT) == l1 - l0:
                return
        elif not self._state_np[l0:l1].any():
            return
        for a, b in self._line_runs(l0, l1, _DIRTY):
            a <<= _LINE_SHIFT
            b <<= _LINE_SHIFT
            self._view[a:b] = self._cview[a:b]
        self._set_state(l0, l1, _ABSENT)

    invalidate_range = flush_range

    def fence(self) -> None:
        with self._barrier:
            pass

    def dirty_lines(self) -> int:
        """Number of overlay lines not yet written back (always 0 when coherent)."""
        if not self.incoherent:
            return 0
        return int(np.count_nonzero(self._state_np == _DIRTY))

    # -- non-temporal integer access -------------------------------------

    def _evict_word_line(self, offset):
        line = offset >> _LINE_SHIFT
        if self._state[line] != _ABSENT:
            self.flush_range(line << _LINE_SHIFT, CACHELINE)

    def nt_store_u64(self, offset: int, value: int) -> None:
        if offset & 7:
            raise DeviceError(f"offset {offset} is not 8-byte aligned")
        self._check(offset, 8)
        if self.incoherent:
            self._evict_word_line(offset)
        self._words[offset >> 3] = value

    def nt_load_u64(self, offset: int) -> int:
        if offset & 7:
            raise DeviceError(f"offset {offset} is not 8-byte aligned")
        self._check(offset, 8)
        if self.incoherent:
            self._evict_word_line(offset)
        return self._words[offset >> 3]

    # -- raw views (bypass the overlay; for bulk scans and tooling) -------

    def raw_view(self, offset: int, length: int) -> memoryview:
        self._check(offset, length)
        return memoryview(self._mm)[offset : offset + length]

    def raw_u64(self, offset: int, count: int) -> np.ndarray:
        self._check(offset, count * 8)
        return np.frombuffer(self._mm, dtype=np.uint64, count=count, offset=offset)


def device_open(config: DeviceConfig) -> DeviceRegion:
    return DeviceRegion(config)
