"""OSU-style latency and bandwidth microbenchmarks.

Run under the launcher, one process per rank::

    cmpi-run -n 2 -- bench two_sided latency --sizes 1:64K
    cmpi-run -n 8 -- bench two_sided bandwidth --sizes 64K:1M --cell-size 64K --csv bw.csv

Ranks ``0..pairs-1`` are senders/origins and rank ``i + pairs`` is the
peer of rank ``i``.  Every run checks payload integrity and raises
``IntegrityError`` on a mismatch; rank 0 gathers per-pair results and
writes the CSV.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CmpiError
from .queue import DEFAULT_CELL_SIZE

PATTERNS = ("one_sided_get", "one_sided_put", "two_sided")
METRICS = ("latency", "bandwidth")
CSV_FIELDS = ("pattern", "metric", "size", "pairs", "cell_size", "value", "iters")

LARGE_MESSAGE = 8 * 1024
TAG_DATA = 100
TAG_ACK = 101
TAG_RESULT = 102


class IntegrityError(CmpiError):
    pass


class ConfigError(CmpiError, ValueError):
    pass


def parse_size(text: str) -> int:
    text = text.strip().upper().removesuffix("B")
    scale = {"K": 1 << 10, "M": 1 << 20, "G": 1 << 30}.get(text[-1:], 1)
    if scale != 1:
        text = text[:-1]
    return int(text) * scale


def parse_sizes(spec: str) -> list[int]:
    """``"a:b"`` -> powers of two from a to b inclusive; ``"a,b,c"`` -> explicit list."""
    if ":" in spec:
        lo, hi = (parse_size(s) for s in spec.split(":", 1))
        out, s = [], 1
        while s <= hi:
            if s >= lo:
                out.append(s)
            s <<= 1
        if lo == 0:
            out.insert(0, 0)
        return out
    return [parse_size(s) for s in spec.split(",") if s]


def default_sizes():
    return [1 << k for k in range(24)]  # 1 B .. 8 MiB


@dataclass
class BenchConfig:
    pattern: str = "two_sided"
    metric: str = "latency"
    sizes: list = field(default_factory=default_sizes)
    pairs: int = 1
    warmup: int | None = None
    iters: int | None = None
    window: int = 64
    cell_size: int = DEFAULT_CELL_SIZE

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {PATTERNS}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if self.pairs < 1:
            raise ConfigError("need at least one pair")
        if not self.sizes or list(self.sizes) != sorted(self.sizes) or self.sizes[0] < 0:
            raise ConfigError("sizes must be a non-empty ascending list")
        if self.metric == "bandwidth" and self.sizes[0] == 0:
            raise ConfigError("zero-byte messages carry no bandwidth")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.warmup is None:
            self.warmup = 100 if self.metric == "latency" else 2
        if self.iters is None:
            self.iters = 1000 if self.metric == "latency" else 20

    def counts(self, size):
        """(warmup, iters) for one size; large messages run a tenth of the iterations."""
        if size > LARGE_MESSAGE:
            return max(0, self.warmup // 10), max(1, self.iters // 10)
        return self.warmup, self.iters

    @property
    def nranks(self):
        return 2 * self.pairs


@dataclass(frozen=True)
class BenchRecord:
    pattern: str
    metric: str
    size: int
    pairs: int
    cell_size: int
    value: float
    iters: int


def _payload(size, seed):
    rng = np.random.default_rng(seed)
    return bytearray(rng.integers(0, 256, size, dtype=np.uint8).tobytes())


def _stamp(buf, i):
    if len(buf) >= 8:
        buf[:8] = i.to_bytes(8, "little")
    elif buf:
        buf[0] = i & 0xFF


def _role(ctx, cfg):
    if ctx.nranks < cfg.nranks:
        raise ConfigError(f"{cfg.pairs} pairs need {cfg.nranks} ranks, got {ctx.nranks}")
    if ctx.rank < cfg.pairs:
        return "origin", ctx.rank + cfg.pairs
    if ctx.rank < cfg.nranks:
        return "target", ctx.rank - cfg.pairs
    return "idle", None


def _gather(ctx, cfg, value):
    """Pair leaders send their value to rank 0; returns the list on rank 0."""
    if ctx.rank == 0:
        vals = [value]
        for r in range(1, cfg.pairs):
            vals.append(float(np.frombuffer(ctx.recv_bytes(r, TAG_RESULT), dtype=np.float64)[0]))
        return vals
    if 0 < ctx.rank < cfg.pairs:
        ctx.send(0, TAG_RESULT, np.array([value], dtype=np.float64).tobytes())
    return None


def _channel(ctx, cfg):
    if cfg.cell_size == ctx.world.cell_size:
        return ctx.world
    return ctx.channel(f"bench{cfg.cell_size}", cell_size=cfg.cell_size)


# -- two-sided ---------------------------------------------------------------


def _two_sided_latency(ctx, cfg, chan, role, peer, size):
    warmup, iters = cfg.counts(size)
    msg = _payload(size, size)
    rbuf = bytearray(max(size, 1))
    view = memoryview(rbuf)[:size]
    ctx.barrier()
    t0 = time.perf_counter()
    for i in range(warmup + iters):
        if i == warmup:
            t0 = time.perf_counter()
        if role == "origin":
            _stamp(msg, i)
            chan.send(peer, TAG_DATA, msg)
            n = chan.recv(peer, TAG_DATA, view)
            if n != size or view != msg:
                raise IntegrityError(f"echo of {size}-byte message {i} differs from what was sent")
        elif role == "target":
            n = chan.recv(peer, TAG_DATA, view)
            chan.send(peer, TAG_DATA, view[:n])
    elapsed = time.perf_counter() - t0
    return elapsed / (2 * iters) * 1e6, iters


def _two_sided_bandwidth(ctx, cfg, chan, role, peer, size):
    warmup, iters = cfg.counts(size)
    msg = _payload(size, size)
    rbuf = bytearray(size)
    crc = 0
    ctx.barrier()
    t0 = time.perf_counter()
    for i in range(warmup + iters):
        if i == warmup:
            # every pair starts its timed phase together so the slowest one bounds the run
            ctx.barrier()
            t0 = time.perf_counter()
        for w in range(cfg.window):
            if role == "origin":
                _stamp(msg, i * cfg.window + w)
                chan.send(peer, TAG_DATA, msg)
                crc = zlib.crc32(msg, crc)
            elif role == "target":
                chan.recv(peer, TAG_DATA, rbuf)
                crc = zlib.crc32(rbuf, crc)
        if role == "origin":
            ack = chan.recv_bytes(peer, TAG_ACK)
        elif role == "target":
            chan.send(peer, TAG_ACK, crc.to_bytes(4, "little"))
    elapsed = time.perf_counter() - t0
    if role == "origin" and int.from_bytes(ack, "little") != crc:
        raise IntegrityError(f"rolling checksum mismatch at {size} bytes")
    return elapsed, iters


# -- one-sided ---------------------------------------------------------------


def _one_sided(ctx, cfg, win, role, peer, size, bandwidth):
    warmup, iters = cfg.counts(size)
    reps = cfg.window if bandwidth else 1
    pattern = bytes(_payload(size, size + 1))
    get = cfg.pattern == "one_sided_get"
    if role == "target":
        win.put(ctx.rank, 0, pattern if get else bytes(size))
    rbuf = bytearray(size)
    ctx.barrier()
    busy = 0.0
    for i in range(warmup + iters):
        if i == warmup:
            ctx.barrier()
            busy = 0.0
        if role == "target":
            win.post([peer])
            win.wait()
        elif role == "origin":
            t = time.perf_counter()
            win.start([peer])
            for _ in range(reps):
                if get:
                    win.get_into(peer, 0, rbuf)
                else:
                    win.put(peer, 0, pattern)
            win.complete()
            busy += time.perf_counter() - t
    if role == "origin" and get and size and rbuf != pattern:
        raise IntegrityError(f"get of {size} bytes returned wrong data")
    ctx.barrier()
    if role == "target" and not get and size and win.get(ctx.rank, 0, size) != pattern:
        raise IntegrityError(f"put of {size} bytes left wrong data in the target segment")
    if role != "origin":
        return 0.0, iters
    if bandwidth:
        return busy, iters
    return busy / iters * 1e6, iters


# -- drivers -----------------------------------------------------------------


def _run(ctx, cfg, bandwidth):
    role, peer = _role(ctx, cfg)
    records = []
    one_sided = cfg.pattern != "two_sided"
    if one_sided:
        win = ctx.win_allocate(f"bench.{cfg.pattern}.{int(bandwidth)}", max(max(cfg.sizes), 1))
    else:
        chan = _channel(ctx, cfg)
    for size in cfg.sizes:
        if one_sided:
            value, iters = _one_sided(ctx, cfg, win, role, peer, size, bandwidth)
        elif bandwidth:
            value, iters = _two_sided_bandwidth(ctx, cfg, chan, role, peer, size)
        else:
            value, iters = _two_sided_latency(ctx, cfg, chan, role, peer, size)
        vals = _gather(ctx, cfg, value if role == "origin" else 0.0)
        if vals is not None:
            if bandwidth:
                # total bytes moved by all pairs over the slowest pair's timed phase
                nbytes = size * cfg.window * iters * len(vals)
                agg = nbytes / float(np.max(vals)) / 1e6 if size else 0.0
            else:
                agg = float(np.mean(vals))
            records.append(BenchRecord(cfg.pattern, "bandwidth" if bandwidth else "latency",
                                       size, cfg.pairs, cfg.cell_size, agg, iters))
    if one_sided:
        win.free()
    ctx.barrier()
    return records


def run_latency(ctx, cfg: BenchConfig) -> list[BenchRecord]:
    """Collective.  Rank 0 gets one record per size (mean over pairs, microseconds)."""
    return _run(ctx, cfg, bandwidth=False)


def run_bandwidth(ctx, cfg: BenchConfig) -> list[BenchRecord]:
    """Collective.  Rank 0 gets one record per size (total bytes over the slowest pair's time, MB/s)."""
    return _run(ctx, cfg, bandwidth=True)


def emit_csv(records, path) -> None:
    rows = sorted(records, key=lambda r: (r.pattern, r.size, r.pairs))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for r in rows:
            writer.writerow([r.pattern, r.metric, r.size, r.pairs, r.cell_size, repr(r.value), r.iters])


def read_csv(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        return [
            BenchRecord(row["pattern"], row["metric"], int(row["size"]), int(row["pairs"]),
                        int(row["cell_size"]), float(row["value"]), int(row["iters"]))
            for row in csv.DictReader(fh)
        ]


def build_parser():
    p = argparse.ArgumentParser(prog="bench", description="cmpi microbenchmarks (run under cmpi-run)")
    p.add_argument("pattern", help="one_sided_get | one_sided_put | two_sided | pingpong")
    p.add_argument("metric", nargs="?", default="latency", choices=METRICS)
    p.add_argument("--sizes", default=None, help="a:b (powers of two) or a,b,c; K/M suffixes allowed")
    p.add_argument("--cell-size", default=None, help="message cell size for two-sided runs")
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--window", type=int, default=64)
    p.add_argument("--csv", default=None, help="write records here (rank 0)")
    return p


def main(argv=None):
    from .runtime import init_from_env

    args = build_parser().parse_args(argv)
    pattern = "two_sided" if args.pattern == "pingpong" else args.pattern
    ctx = init_from_env()
    try:
        cfg = BenchConfig(
            pattern=pattern,
            metric=args.metric,
            sizes=parse_sizes(args.sizes) if args.sizes else default_sizes(),
            pairs=args.pairs or max(1, ctx.nranks // 2),
            warmup=args.warmup,
            iters=args.iters,
            window=args.window,
            cell_size=parse_size(args.cell_size) if args.cell_size else ctx.world.cell_size,
        )
        run = run_bandwidth if cfg.metric == "bandwidth" else run_latency
        records = run(ctx, cfg)
        if ctx.rank == 0:
            if args.csv:
                emit_csv(records, args.csv)
            unit = "MB/s" if cfg.metric == "bandwidth" else "us"
            print(f"# {cfg.pattern} {cfg.metric} pairs={cfg.pairs} cell={cfg.cell_size}")
            for r in records:
                print(f"{r.size:>10d} {r.value:14.2f} {unit}")
        ctx.finalize()
    except BaseException:
        ctx.device.close()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
