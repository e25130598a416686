import os
import time

from .errors import SpinTimeout

_YIELDS = 16
_MIN_SLEEP = 1e-6
_MAX_SLEEP = 1e-3


class Backoff:
    """Spin-wait pacing: a few scheduler yields, then exponential sleep capped at 1 ms.

    Yielding first matters when ranks outnumber cores; the sleep cap bounds
    how stale a waiter can be once the condition flips.
    """

    __slots__ = ("_n", "_delay", "_deadline", "_what")

    def __init__(self, timeout=None, what="condition"):
        self._n = 0
        self._delay = _MIN_SLEEP
        self._deadline = None if timeout is None else time.monotonic() + timeout
        self._what = what

    def pause(self):
        self._n += 1
        if self._n <= _YIELDS:
            os.sched_yield()
        else:
            time.sleep(self._delay)
            self._delay = min(self._delay * 2.0, _MAX_SLEEP)
        if self._deadline is not None and time.monotonic() > self._deadline:
            raise SpinTimeout(f"timed out waiting for {self._what}")

    def reset(self):
        self._n = 0
        self._delay = _MIN_SLEEP


def spin_until(predicate, timeout=None, what="condition"):
    backoff = Backoff(timeout, what)
    while not predicate():
        backoff.pause()
