"""Active-target RMA: rank 0 puts a greeting into every other rank's segment.

Each target opens an exposure epoch with post/wait, and the origin brackets
its puts with start/complete.  Once wait returns, the data is visible.

    cmpi-run -n 4 python3 demos/rma_pscw.py
"""

from cmpi.runtime import init_from_env

ctx = init_from_env()
win = ctx.win_allocate("greetings", 64)
others = list(range(1, ctx.nranks))
if ctx.rank == 0:
    win.start(others)
    for r in others:
        win.put(r, 0, f"hello rank {r}".encode().ljust(64, b"\0"))
    win.complete()
else:
    win.post([0])
    win.wait()
    text = win.get(ctx.rank, 0, 64).rstrip(b"\0").decode()
    print(f"rank {ctx.rank} found {text!r} in its segment")
win.free()
ctx.finalize()
