"""Why the flush/invalidate discipline matters on a non-coherent device.

Two processes attach to the same device in incoherent mode.  The reader
caches a line, the writer updates it, and the reader keeps seeing the old
value until it invalidates.

    python3 demos/stale_read.py
"""

import os
import tempfile

from cmpi.device import DeviceConfig, device_open
from cmpi.testing import run_ranks

path = os.path.join(tempfile.mkdtemp(), "stale.img")
config = DeviceConfig(path, capacity=1 << 20, mode="incoherent")


def body(rank, nranks):
    dev = device_open(config)
    flag = 4096
    if rank == 0:
        dev.write_bytes(0, b"old value!")
        dev.flush_range(0, 64)
        dev.nt_store_u64(flag, 1)
        while dev.nt_load_u64(flag) != 2:
            pass
        dev.write_bytes(0, b"new value!")
        dev.flush_range(0, 64)
        dev.nt_store_u64(flag, 3)
        return None
    while dev.nt_load_u64(flag) != 1:
        pass
    first = dev.read_bytes(0, 10, invalidate_first=True)
    dev.nt_store_u64(flag, 2)
    while dev.nt_load_u64(flag) != 3:
        pass
    cached = dev.read_bytes(0, 10)
    fresh = dev.read_bytes(0, 10, invalidate_first=True)
    return first, cached, fresh


first, cached, fresh = run_ranks(2, body)[1]
print("reader saw first      ", first)
print("plain read after update", cached, "(stale line from the private cache)")
print("read with invalidate   ", fresh)
os.unlink(path)
