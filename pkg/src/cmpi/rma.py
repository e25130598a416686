"""One-sided windows: one arena object holding every rank's segment back to back.

Segment ``r`` starts at ``object + r * seg_size``, so any rank can locate
any peer's memory from the object offset alone.  ``put`` writes straight
into the target segment and flushes; ``get`` invalidates and copies out.
Epochs are opened with PSCW or a per-target bakery lock (see ``sync``).
"""

from __future__ import annotations

import os

from .arena import round_up
from .errors import EpochError, RmaError
from .sync import SyncArray, sync_array_bytes

_FAULTS_ENV = "CMPI_FAULTS"


def _faults():
    return frozenset(f for f in os.environ.get(_FAULTS_ENV, "").split(",") if f)


def _byte_view(data):
    mv = memoryview(data)
    if mv.format != "B" or mv.ndim != 1:
        mv = mv.cast("B")
    return mv


class Window:
    def __init__(self, arena, name, nranks, rank, seg_size, handle, sync_handle,
                 barrier=None, strict=True, timeout=None):
        self.arena = arena
        self.region = arena.region
        self.name = name
        self.nranks = nranks
        self.rank = rank
        self.seg_size = seg_size
        self.handle = handle
        self.base = arena.address(handle)
        self.sync = SyncArray(self.region, arena.address(sync_handle), nranks, rank, timeout=timeout)
        self.strict = strict
        self._barrier = barrier
        # CMPI_FAULTS=skip_put_flush drops the write-back after put (negative testing)
        self._flush_puts = "skip_put_flush" not in _faults()
        self.freed = False

    def segment_offset(self, rank: int) -> int:
        """Device offset of ``rank``'s segment; identical on every rank."""
        if not 0 <= rank < self.nranks:
            raise RmaError(f"rank {rank} outside window of {self.nranks}")
        return self.base + rank * self.seg_size

    def _target_range(self, target, disp, n):
        if disp < 0 or disp + n > self.seg_size:
            raise RmaError(
                f"[{disp}, {disp + n}) falls outside the {self.seg_size}-byte segment"
            )
        if self.strict and target != self.rank:
            access = self.sync.access_group
            if not ((access is not None and target in access) or self.sync.holds_lock(target)):
                raise EpochError(f"no access epoch open on rank {target}")
        return self.segment_offset(target) + disp

    def put(self, target: int, disp: int, data) -> None:
        mv = _byte_view(data)
        off = self._target_range(target, disp, mv.nbytes)
        self.region.write_bytes(off, mv)
        if self._flush_puts:
            self.region.flush_range(off, mv.nbytes)
        self.region.fence()

    def get(self, target: int, disp: int, length: int) -> bytes:
        off = self._target_range(target, disp, length)
        self.region.fence()
        return self.region.read_bytes(off, length, invalidate_first=True)

    def get_into(self, target: int, disp: int, out) -> int:
        mv = _byte_view(out)
        off = self._target_range(target, disp, mv.nbytes)
        self.region.fence()
        return self.region.read_into(off, mv, invalidate_first=True)

    # synchronization

    def post(self, origins):
        self.sync.post(origins)

    def wait(self):
        self.sync.wait()

    def test(self):
        return self.sync.test()

    def start(self, targets):
        self.sync.start(targets)

    def complete(self):
        self.sync.complete()

    def lock(self, target):
        self.sync.lock(target)

    def unlock(self, target):
        self.sync.unlock(target)

    def free(self):
        """Collective: every rank stops using the window, then rank 0 unlinks it."""
        if self.freed:
            return
        if self._barrier is not None:
            self._barrier()
        if self.rank == 0:
            self.arena.unlink(f"win.{self.name}")
            self.arena.unlink(f"win.{self.name}.sync")
        self.freed = True


def win_allocate_shared(arena, name, seg_size, rank, nranks, barrier=None, timeout=30.0,
                        strict=True) -> Window:
    """Collective window creation by deterministic name ``win.<name>``.

    Rank 0 creates the segment object and its sync array; the other ranks
    spin on open until both exist.  A segment-size mismatch between ranks
    shows up as an object of the wrong size.
    """
    if seg_size <= 0:
        raise RmaError("segment size must be positive")
    seg = round_up(seg_size)
    obj_name = f"win.{name}"
    sync_name = f"win.{name}.sync"
    if rank == 0:
        handle = arena.create(obj_name, nranks * seg)
        sync_handle = arena.create(sync_name, sync_array_bytes(nranks))
    else:
        handle = arena.open_wait(obj_name, timeout)
        sync_handle = arena.open_wait(sync_name, timeout)
    if handle.size != nranks * seg:
        raise RmaError(
            f"{obj_name} holds {handle.size} bytes; {nranks} segments of {seg} need {nranks * seg}"
        )
    if sync_handle.size != sync_array_bytes(nranks):
        raise RmaError(f"{sync_name} does not match a {nranks}-rank communicator")
    return Window(arena, name, nranks, rank, seg, handle, sync_handle, barrier=barrier,
                  strict=strict, timeout=timeout)
