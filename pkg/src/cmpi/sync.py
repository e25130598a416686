"""Synchronization built from plain and non-temporal loads/stores only.

Three primitives live here:

* ``SyncArray``: per-(origin, target) Post and Complete flags for PSCW
  epochs, plus one bakery lock per target for Lock/Unlock epochs.
* ``BakeryLock``: Lamport's bakery algorithm over device words.  The
  algorithm is written as a pure step function (``bakery_step``) so the
  same code runs against the device and inside ``explore_bakery``, an
  exhaustive interleaving checker.
* ``Barrier``: the sequence-number barrier; each rank bumps its own
  counter and waits until every counter has caught up.

Nothing here uses an atomic read-modify-write on shared memory.
"""

from __future__ import annotations

from collections import deque

from ._spin import Backoff
from .device import CACHELINE
from .errors import EpochError, LockError

# ---------------------------------------------------------------------------
# bakery lock

CHOOSING = 0
NUMBER = 1

# program counters of the acquire protocol
IDLE = 0
ENTER = 1
SCAN = 2
TAKE = 3
UNCHOOSE = 4
WAIT_CHOOSING = 5
WAIT_NUMBER = 6
IN_CS = 7


def _next_peer(j, me):
    j += 1
    if j == me:
        j += 1
    return j


def bakery_step(me, n, local, load, store):
    """Advance one shared-memory access of ``me``'s acquire protocol.

    ``local`` is ``(pc, j, maxv, ticket)``.  ``load(kind, idx)`` and
    ``store(kind, idx, value)`` touch the ``choosing``/``number`` arrays.
    A waiting step returns ``local`` unchanged, which callers treat as spin.
    """
    pc, j, maxv, ticket = local
    if pc == ENTER:
        store(CHOOSING, me, 1)
        return (SCAN, 0, 0, 0)
    if pc == SCAN:
        v = load(NUMBER, j)
        if v > maxv:
            maxv = v
        j += 1
        if j == n:
            return (TAKE, 0, maxv, 0)
        return (SCAN, j, maxv, 0)
    if pc == TAKE:
        ticket = maxv + 1
        store(NUMBER, me, ticket)
        return (UNCHOOSE, 0, 0, ticket)
    if pc == UNCHOOSE:
        store(CHOOSING, me, 0)
        j = _next_peer(-1, me)
        return (IN_CS if j >= n else WAIT_CHOOSING, j, 0, ticket)
    if pc == WAIT_CHOOSING:
        if load(CHOOSING, j):
            return local
        return (WAIT_NUMBER, j, 0, ticket)
    if pc == WAIT_NUMBER:
        v = load(NUMBER, j)
        if v and (v, j) < (ticket, me):
            return local
        j = _next_peer(j, me)
        return (IN_CS if j >= n else WAIT_CHOOSING, j, 0, ticket)
    raise ValueError(f"no acquire step from pc={pc}")


class BakeryLock:
    """Mutual exclusion among ``nranks`` processes, one 64-byte cell per rank.

    Cell ``i`` at ``base + i * stride`` holds ``choosing[i]`` (word 0) and
    ``number[i]`` (word 1); only rank ``i`` ever writes it.
    """

    def __init__(self, region, base, nranks, rank, stride=CACHELINE, timeout=None):
        if not 0 <= rank < nranks:
            raise LockError(f"rank {rank} outside lock of {nranks} ranks")
        self.region = region
        self.base = base
        self.nranks = nranks
        self.rank = rank
        self.stride = stride
        self.timeout = timeout
        self.held = False

    def _load(self, kind, idx):
        return self.region.nt_load_u64(self.base + idx * self.stride + kind * 8)

    def _store(self, kind, idx, value):
        self.region.nt_store_u64(self.base + idx * self.stride + kind * 8, value)
        # bakery needs store->load order; the fence forbids store buffering past it
        self.region.fence()

    def acquire(self):
        if self.held:
            raise LockError("lock is not re-entrant")
        local = (ENTER, 0, 0, 0)
        backoff = Backoff(self.timeout, "bakery lock")
        while local[0] != IN_CS:
            nxt = bakery_step(self.rank, self.nranks, local, self._load, self._store)
            if nxt == local:
                backoff.pause()
            local = nxt
        self.held = True

    def release(self):
        if not self.held:
            raise LockError("release of a lock that is not held")
        self.region.fence()
        self._store(NUMBER, self.rank, 0)
        self.held = False

    def __enter__(self):
        self.acquire()
        return self

    def __exit__(self, *exc):
        self.release()


def explore_bakery(nprocs=3, entries=1, max_states=2_000_000, step=bakery_step):
    """Exhaustively interleave ``nprocs`` bakery clients, each entering ``entries`` times.

    Every load and store is one atomic, sequentially consistent step.
    Returns a dict with the number of reachable states, the states that
    violate mutual exclusion, and the states from which the all-done
    terminal state is unreachable (deadlock or livelock traps).
    ``step`` swaps in a mutated protocol for negative controls.
    """
    n = nprocs
    init = (tuple((IDLE, 0, 0, 0, 0) for _ in range(n)), (0,) * n, (0,) * n)

    def successors(state):
        procs, choosing, number = state
        for p in range(n):
            pc, j, maxv, ticket, done = procs[p]
            if pc == IDLE:
                if done == entries:
                    continue
                nproc = (ENTER, 0, 0, 0, done)
                mem = (choosing, number)
            elif pc == IN_CS:
                nproc = (IDLE, 0, 0, 0, done + 1)
                num = list(number)
                num[p] = 0
                mem = (choosing, tuple(num))
            else:
                arrays = [list(choosing), list(number)]

                def load(kind, idx):
                    return arrays[kind][idx]

                def store(kind, idx, value):
                    arrays[kind][idx] = value

                loc = step(p, n, (pc, j, maxv, ticket), load, store)
                if loc == (pc, j, maxv, ticket):
                    continue  # spinning: self-loop
                nproc = loc + (done,)
                mem = (tuple(arrays[0]), tuple(arrays[1]))
            nprocs_ = procs[:p] + (nproc,) + procs[p + 1 :]
            yield (nprocs_, mem[0], mem[1])

    index = {init: 0}
    order = [init]
    preds = [[]]
    violations = []
    queue = deque([init])
    while queue:
        state = queue.popleft()
        sid = index[state]
        if sum(1 for pr in state[0] if pr[0] == IN_CS) > 1:
            violations.append(state)
        for nxt in successors(state):
            nid = index.get(nxt)
            if nid is None:
                if len(order) >= max_states:
                    raise RuntimeError(f"state space exceeds {max_states}")
                nid = len(order)
                index[nxt] = nid
                order.append(nxt)
                preds.append([])
                queue.append(nxt)
            preds[nid].append(sid)

    terminal = [
        i for i, s in enumerate(order) if all(pr[0] == IDLE and pr[4] == entries for pr in s[0])
    ]
    can_finish = [False] * len(order)
    stack = list(terminal)
    for t in terminal:
        can_finish[t] = True
    while stack:
        s = stack.pop()
        for p in preds[s]:
            if not can_finish[p]:
                can_finish[p] = True
                stack.append(p)
    stuck = [order[i] for i, ok in enumerate(can_finish) if not ok]
    return {
        "states": len(order),
        "terminal": len(terminal),
        "violations": violations,
        "stuck": stuck,
    }


# ---------------------------------------------------------------------------
# PSCW flags and window locks


def sync_array_bytes(nranks):
    """Bytes needed by a SyncArray: two flag lines per pair plus ``nranks`` lock cells per target."""
    return 3 * nranks * nranks * CACHELINE


class SyncArray:
    """Post/Complete flags and per-target window locks for one window.

    ``post_flag(o, t)`` is set by target ``t`` and cleared by origin ``o``;
    ``complete_flag(o, t)`` is set by origin ``o`` and cleared by target ``t``.
    """

    def __init__(self, region, base, nranks, rank, timeout=None):
        self.region = region
        self.base = base
        self.nranks = nranks
        self.rank = rank
        self.timeout = timeout
        self._exposure = None
        self._access = None
        lock_base = base + 2 * nranks * nranks * CACHELINE
        self._locks = [
            BakeryLock(region, lock_base + t * nranks * CACHELINE, nranks, rank, timeout=timeout)
            for t in range(nranks)
        ]

    def post_flag_offset(self, origin, target):
        return self.base + 2 * (target * self.nranks + origin) * CACHELINE

    def complete_flag_offset(self, origin, target):
        return self.post_flag_offset(origin, target) + CACHELINE

    def _check_group(self, group):
        group = tuple(sorted(set(int(r) for r in group)))
        for r in group:
            if not 0 <= r < self.nranks:
                raise EpochError(f"rank {r} outside communicator of {self.nranks}")
        return group

    # target side

    def post(self, origins):
        if self._exposure is not None:
            raise EpochError("post while an exposure epoch is open")
        group = self._check_group(origins)
        self.region.fence()
        for o in group:
            self.region.nt_store_u64(self.post_flag_offset(o, self.rank), 1)
        self._exposure = group

    def wait(self):
        if self._exposure is None:
            raise EpochError("wait without a matching post")
        load = self.region.nt_load_u64
        for o in self._exposure:
            off = self.complete_flag_offset(o, self.rank)
            backoff = Backoff(self.timeout, f"complete from rank {o}")
            while load(off) != 1:
                backoff.pause()
            self.region.nt_store_u64(off, 0)
        self.region.fence()
        self._exposure = None

    def test(self):
        """Non-blocking wait: True (and the epoch closed) once every origin completed."""
        if self._exposure is None:
            raise EpochError("test without a matching post")
        load = self.region.nt_load_u64
        if any(load(self.complete_flag_offset(o, self.rank)) != 1 for o in self._exposure):
            return False
        self.wait()
        return True

    # origin side

    def start(self, targets):
        if self._access is not None:
            raise EpochError("start while an access epoch is open")
        group = self._check_group(targets)
        load = self.region.nt_load_u64
        for t in group:
            off = self.post_flag_offset(self.rank, t)
            backoff = Backoff(self.timeout, f"post from rank {t}")
            while load(off) != 1:
                backoff.pause()
            self.region.nt_store_u64(off, 0)
        self.region.fence()
        self._access = frozenset(group)

    def complete(self):
        if self._access is None:
            raise EpochError("complete without a matching start")
        self.region.fence()
        for t in sorted(self._access):
            self.region.nt_store_u64(self.complete_flag_offset(self.rank, t), 1)
        self._access = None

    @property
    def access_group(self):
        return self._access

    @property
    def exposure_group(self):
        return self._exposure

    # lock/unlock epochs

    def lock(self, target):
        self._locks[target].acquire()

    def unlock(self, target):
        self._locks[target].release()

    def holds_lock(self, target):
        return self._locks[target].held


# ---------------------------------------------------------------------------
# sequence-number barrier


def barrier_bytes(nranks):
    return nranks * CACHELINE


class Barrier:
    """``seq[r]`` lives on its own line at ``base + r * 64`` and only rank ``r`` writes it."""

    def __init__(self, region, base, nranks, rank, timeout=None):
        self.region = region
        self.base = base
        self.nranks = nranks
        self.rank = rank
        self.timeout = timeout
        self.seq = region.nt_load_u64(base + rank * CACHELINE)

    def wait(self, timeout=None):
        region = self.region
        region.fence()
        self.seq += 1
        target = self.seq
        region.nt_store_u64(self.base + self.rank * CACHELINE, target)
        region.fence()
        pending = [r for r in range(self.nranks) if r != self.rank]
        backoff = Backoff(self.timeout if timeout is None else timeout, "barrier peers")
        load = region.nt_load_u64
        while pending:
            pending = [r for r in pending if load(self.base + r * CACHELINE) < target]
            if pending:
                backoff.pause()
        region.fence()

    __call__ = wait
