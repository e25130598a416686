"""Create, open, list and unlink named objects in a private arena.

Needs no launcher; it formats a small scratch device of its own.

    python3 demos/arena_tour.py
"""

import os
import tempfile

from cmpi.arena import Arena, HashGeometry, arena_format
from cmpi.device import DeviceConfig, device_open

path = os.path.join(tempfile.mkdtemp(), "tour.img")
with device_open(DeviceConfig(path, capacity=8 << 20)) as dev:
    arena_format(dev, HashGeometry.from_cap(997, 4))
    arena = Arena(dev)
    for name, size in (("matrix", 4096), ("flags", 10), ("log", 100_000)):
        h = arena.create(name, size)
        print(f"created {name:<7} slot {h.slot_index:<5} offset {h.offset:<7} size {h.size}")
    h = arena.open("flags")
    dev.write_bytes(arena.address(h), b"ready")
    print("flags holds", dev.read_bytes(arena.address(h), 5))
    arena.unlink("matrix")
    print("after unlink:", [(s.name, s.level, s.bucket) for s in arena.list()])
    print("allocation cursor is", arena.alloc_cursor, "bytes (space is never reclaimed)")
os.unlink(path)
