"""Two ranks bounce a growing message back and forth and report round-trip times.

Run under the launcher so both ranks share one device:

    cmpi-run -n 2 python3 demos/pingpong.py
"""

import time

from cmpi.runtime import init_from_env

ctx = init_from_env()
peer = 1 - ctx.rank
for size in (8, 1024, 65536, 1 << 20):
    msg = bytes(range(256)) * (size // 256) if size >= 256 else b"x" * size
    buf = bytearray(size)
    ctx.barrier()
    t0 = time.perf_counter()
    for _ in range(20):
        if ctx.rank == 0:
            ctx.send(peer, 1, msg)
            ctx.recv(peer, 1, buf)
        else:
            n = ctx.recv(peer, 1, buf)
            ctx.send(peer, 1, buf[:n])
    if ctx.rank == 0:
        assert buf == msg
        print(f"{size:>8} bytes  {(time.perf_counter() - t0) / 20 * 1e6:9.1f} us per round trip")
ctx.finalize()
