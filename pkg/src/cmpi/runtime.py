"""Rank bootstrap, lifecycle and the local process launcher.

Ranks are OS processes on one machine sharing one device file.  Object
names are deterministic (``barrier.world``, ``qm.world``, ``win.<name>``),
so nothing has to be broadcast: rank 0 creates, everybody else opens by
name, and the sequence-number barrier orders the two.
"""

from __future__ import annotations

import os
import subprocess
import sys
import tempfile
import time

from . import queue as _queue
from .arena import Arena, HashGeometry, arena_format, wait_formatted
from .device import COHERENT, DEFAULT_CAPACITY, INCOHERENT, DeviceConfig, device_open
from .errors import GeometryMismatch, RuntimeStateError
from .rma import win_allocate_shared
from .sync import Barrier, barrier_bytes

ENV_RANK = "CMPI_RANK"
ENV_NRANKS = "CMPI_NRANKS"
ENV_DEVICE = "CMPI_DEVICE"
ENV_DEVICE_SIZE = "CMPI_DEVICE_SIZE"
ENV_INCOHERENT = "CMPI_INCOHERENT"
ENV_CELL_SIZE = "CMPI_CELL_SIZE"
ENV_QUEUE_DEPTH = "CMPI_QUEUE_DEPTH"
ENV_TIMEOUT = "CMPI_TIMEOUT"

DEFAULT_TIMEOUT = 30.0


class RankContext:
    """Everything one rank holds: device mapping, arena, barrier, world channel, windows."""

    def __init__(self, rank, nranks, device, arena, barrier, world, timeout):
        self.rank = rank
        self.nranks = nranks
        self.device = device
        self.arena = arena
        self._barrier = barrier
        self.world = world
        self.timeout = timeout
        self.windows = {}
        self.channels = {"world": world}
        self.finalized = False

    def __repr__(self):
        return f"RankContext(rank={self.rank}, nranks={self.nranks}, device={self.device.config.backing_path!r})"

    def _live(self):
        if self.finalized:
            raise RuntimeStateError("context already finalized")

    # collectives and point-to-point on the world channel

    def barrier(self, timeout=None):
        self._live()
        self._barrier.wait(timeout)

    @property
    def barrier_seq(self):
        return self._barrier.seq

    def send(self, dst, tag, data=b""):
        return self.world.send(dst, tag, data)

    def recv(self, src, tag, buf):
        return self.world.recv(src, tag, buf)

    def recv_bytes(self, src, tag):
        return self.world.recv_bytes(src, tag)

    @property
    def status(self):
        return self.world.status

    def channel(self, name, cell_size=_queue.DEFAULT_CELL_SIZE, depth=_queue.DEFAULT_DEPTH):
        """Collective: a separate queue matrix (e.g. with another cell size)."""
        self._live()
        if name in self.channels:
            return self.channels[name]
        matrix = _queue.matrix_create(self.arena, name, self.nranks, cell_size, depth,
                                      self.rank, self.timeout)
        chan = _queue.Channel(matrix, self.rank, timeout=self.timeout)
        self.channels[name] = chan
        return chan

    def win_allocate(self, name, seg_size, strict=True):
        """Collective window allocation; see ``rma.win_allocate_shared``."""
        self._live()
        win = win_allocate_shared(self.arena, name, seg_size, self.rank, self.nranks,
                                  barrier=self.barrier, timeout=self.timeout, strict=strict)
        self.windows[name] = win
        return win

    def finalize(self, cleanup=False):
        finalize(self, cleanup=cleanup)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *exc):
        if not self.finalized:
            if exc_type is None:
                self.finalize()
            else:
                self.device.close()
                self.finalized = True


def init(rank, nranks, config: DeviceConfig, cell_size=_queue.DEFAULT_CELL_SIZE,
         depth=_queue.DEFAULT_DEPTH, timeout=DEFAULT_TIMEOUT, geometry=None) -> RankContext:
    """Attach rank ``rank`` of ``nranks`` to the device and pass the initialization barrier."""
    if nranks < 1 or not 0 <= rank < nranks:
        raise RuntimeStateError(f"invalid rank {rank} of {nranks}")
    device = device_open(config)
    try:
        if rank == 0:
            arena_format(device, geometry)
        else:
            header = wait_formatted(device, timeout)
            if geometry is not None and header.geometry != geometry:
                raise GeometryMismatch("arena geometry differs from the requested one")
        arena = Arena(device, rank, nranks, timeout=timeout)

        size = barrier_bytes(nranks)
        if rank == 0:
            if arena.exists("barrier.world"):
                # peers may already be opening these stale objects, so they cannot be replaced here
                raise RuntimeStateError(
                    f"{config.backing_path} still holds a previous job's objects; "
                    "reset the device (cmpi-run does) or use a fresh file"
                )
            handle = arena.create("barrier.world", size)
        else:
            handle = arena.open_wait("barrier.world", timeout)
        if handle.size != size:
            raise RuntimeStateError(
                f"barrier.world sized for {handle.size // 64} ranks, this rank expects {nranks}"
            )
        barrier = Barrier(device, arena.address(handle), nranks, rank, timeout=timeout)
        matrix = _queue.matrix_create(arena, "world", nranks, cell_size, depth, rank, timeout)
        world = _queue.Channel(matrix, rank, timeout=timeout)
        barrier.wait()
    except BaseException:
        device.close()
        raise
    return RankContext(rank, nranks, device, arena, barrier, world, timeout)


def finalize(ctx, cleanup=False):
    if not isinstance(ctx, RankContext):
        raise RuntimeStateError("finalize called without an initialized context")
    if ctx.finalized:
        raise RuntimeStateError("context already finalized")
    ctx.barrier()
    ctx.finalized = True
    path = ctx.device.config.backing_path
    ctx.windows.clear()
    ctx.channels.clear()
    ctx.device.close()
    if cleanup and ctx.rank == 0:
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass


def config_from_env(env=None) -> DeviceConfig:
    env = os.environ if env is None else env
    path = env.get(ENV_DEVICE)
    if not path:
        raise RuntimeStateError(f"{ENV_DEVICE} is not set")
    return DeviceConfig(
        path,
        capacity=int(env.get(ENV_DEVICE_SIZE, DEFAULT_CAPACITY)),
        mode=INCOHERENT if env.get(ENV_INCOHERENT, "0") not in ("", "0") else COHERENT,
    )


def init_from_env(env=None, **kwargs) -> RankContext:
    """Initialize from the variables set by ``cmpi-run``."""
    env = os.environ if env is None else env
    try:
        rank = int(env[ENV_RANK])
        nranks = int(env[ENV_NRANKS])
    except KeyError as exc:
        raise RuntimeStateError(f"{exc.args[0]} is not set; launch with cmpi-run") from None
    kwargs.setdefault("cell_size", int(env.get(ENV_CELL_SIZE, _queue.DEFAULT_CELL_SIZE)))
    kwargs.setdefault("depth", int(env.get(ENV_QUEUE_DEPTH, _queue.DEFAULT_DEPTH)))
    kwargs.setdefault("timeout", float(env.get(ENV_TIMEOUT, DEFAULT_TIMEOUT)))
    return init(rank, nranks, config_from_env(env), **kwargs)


def default_device_path():
    root = "/dev/shm" if os.path.isdir("/dev/shm") else tempfile.gettempdir()
    return os.path.join(root, f"cmpi-{os.getpid()}.img")


def reset_device(path, capacity):
    """Truncate the backing file to zero and re-extend it: a blank, unformatted device."""
    DeviceConfig(path, capacity)  # validates capacity
    with open(path, "wb") as fh:
        fh.truncate(capacity)


def _resolve_command(cmd):
    if cmd and cmd[0] == "bench":
        return [sys.executable, "-m", "cmpi.bench", *cmd[1:]]
    if cmd and cmd[0].endswith(".py"):
        return [sys.executable, *cmd]
    return list(cmd)


def launch(nranks, cmd, device=None, device_size=DEFAULT_CAPACITY, incoherent=False,
           cell_size=None, queue_depth=None, timeout=None, cleanup=False, grace=2.0,
           stderr=None, stdout=None, log=sys.stderr) -> int:
    """Run ``cmd`` as ``nranks`` processes on a freshly reset device; returns an exit status.

    If any rank fails the others get ``grace`` seconds before being
    terminated, and the first failing rank is reported on ``log``.
    """
    if nranks < 1:
        raise ValueError("need at least one rank")
    if not cmd:
        raise ValueError("no command given")
    path = device or os.environ.get(ENV_DEVICE) or default_device_path()
    reset_device(path, device_size)
    argv = _resolve_command(cmd)
    base_env = dict(os.environ)
    base_env.update({
        ENV_NRANKS: str(nranks),
        ENV_DEVICE: path,
        ENV_DEVICE_SIZE: str(device_size),
        ENV_INCOHERENT: "1" if incoherent else "0",
    })
    if cell_size is not None:
        base_env[ENV_CELL_SIZE] = str(cell_size)
    if queue_depth is not None:
        base_env[ENV_QUEUE_DEPTH] = str(queue_depth)
    if timeout is not None:
        base_env[ENV_TIMEOUT] = str(timeout)

    procs = []
    try:
        for r in range(nranks):
            env = dict(base_env, **{ENV_RANK: str(r)})
            procs.append(subprocess.Popen(argv, env=env, stdout=stdout, stderr=stderr))
    except OSError as exc:
        for p in procs:
            p.kill()
        print(f"cmpi-run: cannot spawn {argv[0]}: {exc}", file=log)
        return 127

    status = 0
    failed_at = None
    codes = [None] * nranks
    while any(c is None for c in codes):
        for r, p in enumerate(procs):
            if codes[r] is None:
                codes[r] = p.poll()
                if codes[r] not in (None, 0) and status == 0:
                    status = codes[r] if codes[r] > 0 else 128 - codes[r]
                    failed_at = time.monotonic()
                    print(f"cmpi-run: rank {r} exited with status {codes[r]}", file=log)
        if failed_at is not None and time.monotonic() - failed_at > grace:
            for r, p in enumerate(procs):
                if codes[r] is None:
                    p.terminate()
            for r, p in enumerate(procs):
                if codes[r] is None:
                    try:
                        codes[r] = p.wait(5)
                    except subprocess.TimeoutExpired:
                        p.kill()
                        codes[r] = p.wait()
            break
        time.sleep(0.005)
    if cleanup:
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass
    return status
