"""Run a function as N forked ranks and collect what each returns.

Handy in tests and demo scripts where going through ``cmpi-run`` would
mean writing a separate program per experiment.
"""

from __future__ import annotations

import multiprocessing as mp
import os
import time
import traceback
from multiprocessing.connection import wait

from .errors import CmpiError


class RankFailed(CmpiError):
    def __init__(self, rank, detail):
        super().__init__(f"rank {rank} failed:\n{detail}")
        self.rank = rank
        self.detail = detail


def _child(conn, fn, rank, nranks, args, kwargs):
    status = 0
    try:
        conn.send(("ok", fn(rank, nranks, *args, **kwargs)))
    except BaseException:
        conn.send(("err", traceback.format_exc()))
        status = 1
    finally:
        conn.close()
        os._exit(status)


def run_ranks(nranks, fn, *args, timeout=300.0, **kwargs):
    """Call ``fn(rank, nranks, *args, **kwargs)`` in ``nranks`` forked processes.

    Returns the per-rank results in rank order; raises ``RankFailed`` for
    the first rank that raised, and kills everything on ``timeout``.
    """
    ctx = mp.get_context("fork")
    conns, procs = [], []
    for r in range(nranks):
        parent, child = ctx.Pipe(duplex=False)
        p = ctx.Process(target=_child, args=(child, fn, r, nranks, args, kwargs), daemon=True)
        p.start()
        child.close()
        conns.append(parent)
        procs.append(p)

    results = [None] * nranks
    pending = dict(zip(conns, range(nranks)))
    failure = None
    deadline = time.monotonic() + timeout
    try:
        while pending:
            left = deadline - time.monotonic()
            if left <= 0:
                raise TimeoutError(f"ranks {sorted(pending.values())} still running after {timeout}s")
            for conn in wait(list(pending), timeout=min(left, 1.0)):
                rank = pending.pop(conn)
                try:
                    kind, value = conn.recv()
                except EOFError:
                    kind, value = "err", f"exited with status {procs[rank].exitcode} before reporting"
                if kind == "ok":
                    results[rank] = value
                elif failure is None:
                    failure = RankFailed(rank, value)
                    # peers would spin on the dead rank until their own timeouts
                    deadline = min(deadline, time.monotonic() + 5.0)
            if failure is not None and not pending:
                break
    finally:
        for p in procs:
            if p.is_alive():
                p.kill()
            p.join()
        for c in conns:
            c.close()
    if failure is not None:
        raise failure
    return results
