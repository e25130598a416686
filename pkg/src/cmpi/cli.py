"""Command-line entry points: ``cmpi-run`` and ``cmpi-arena``."""

from __future__ import annotations

import argparse
import os
import sys

from .arena import Arena, HashGeometry, arena_format
from .bench import parse_size
from .device import COHERENT, DEFAULT_CAPACITY, INCOHERENT, DeviceConfig, device_open
from .errors import CmpiError
from .runtime import ENV_DEVICE, launch


def _size(text):
    try:
        return parse_size(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a size: {text!r}") from None


def _device_args(p, size_default=DEFAULT_CAPACITY, size_help="device capacity in bytes (K/M/G suffixes allowed)"):
    p.add_argument("--device", default=os.environ.get(ENV_DEVICE),
                   help="backing file of the emulated device (default: $CMPI_DEVICE)")
    p.add_argument("--device-size", type=_size, default=size_default, help=size_help)
    p.add_argument("--incoherent", action="store_true",
                   help="emulate a non-coherent device (private write-back line cache per rank)")


def run_parser():
    p = argparse.ArgumentParser(prog="cmpi-run", description="Launch N local ranks on one emulated device.")
    p.add_argument("-n", "--nranks", type=int, required=True)
    _device_args(p)
    p.add_argument("--cell-size", type=_size, default=None, choices=[16 << 10, 32 << 10, 64 << 10, 128 << 10],
                   metavar="{16K,32K,64K,128K}")
    p.add_argument("--queue-depth", type=int, default=None)
    p.add_argument("--timeout", type=float, default=None, help="seconds a rank waits on peers")
    p.add_argument("--cleanup", action="store_true", help="delete the device file afterwards")
    p.add_argument("cmd", nargs=argparse.REMAINDER, help="command to run, e.g. `-- bench two_sided latency`")
    return p


def run_main(argv=None):
    p = run_parser()
    args = p.parse_args(argv)
    cmd = args.cmd[1:] if args.cmd[:1] == ["--"] else args.cmd
    if args.nranks < 1:
        p.error("-n must be at least 1")
    if not cmd:
        p.error("no command given")
    return launch(args.nranks, cmd, device=args.device, device_size=args.device_size,
                  incoherent=args.incoherent, cell_size=args.cell_size, queue_depth=args.queue_depth,
                  timeout=args.timeout, cleanup=args.cleanup)


def arena_parser():
    p = argparse.ArgumentParser(prog="cmpi-arena", description="Inspect or edit a device's shared-object arena.")
    _device_args(p, None, "device capacity (default: size of an existing file, else 1G)")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = sub.add_parser("format", help="write a fresh arena")
    fmt.add_argument("--level-cap", type=int, default=200_000, help="bucket-count cap of level one")
    fmt.add_argument("--levels", type=int, default=10)
    fmt.add_argument("--force", action="store_true", help="wipe an existing arena")
    sub.add_parser("ls", help="list live objects")
    cr = sub.add_parser("create", help="create an object")
    cr.add_argument("name")
    cr.add_argument("size", type=_size)
    un = sub.add_parser("unlink", help="remove an object's name")
    un.add_argument("name")
    st = sub.add_parser("stat", help="show one object's slot")
    st.add_argument("name")
    return p


def arena_main(argv=None, out=sys.stdout):
    p = arena_parser()
    args = p.parse_args(argv)
    if not args.device:
        p.error("--device (or CMPI_DEVICE) is required")
    size = args.device_size
    if size is None:
        size = os.path.getsize(args.device) if os.path.exists(args.device) else DEFAULT_CAPACITY
    config = DeviceConfig(args.device, capacity=size,
                          mode=INCOHERENT if args.incoherent else COHERENT)
    try:
        with device_open(config) as dev:
            if args.command == "format":
                geometry = HashGeometry.from_cap(args.level_cap, args.levels)
                h = arena_format(dev, geometry, force=args.force)
                print(f"slots={h.geometry.slot_total} metadata_off={h.metadata_off} "
                      f"objects_off={h.objects_off} objects_len={h.objects_len}", file=out)
                return 0
            arena = Arena(dev)
            if args.command == "ls":
                for info in arena.list():
                    print(f"{info.name}\t{info.offset}\t{info.size}\tslot={info.slot_index}"
                          f"\tlevel={info.level}\towner={info.owner}", file=out)
            elif args.command == "create":
                h = arena.create(args.name, args.size)
                print(f"{args.name}\t{h.offset}\t{h.size}", file=out)
            elif args.command == "unlink":
                arena.unlink(args.name)
            elif args.command == "stat":
                info = arena.stat(args.name)
                for key, value in info.__dict__.items():
                    print(f"{key}: {value}", file=out)
            return 0
    except CmpiError as exc:
        print(f"cmpi-arena: {exc}", file=sys.stderr)
        return 1


def bench_main(argv=None):
    from .bench import main

    return main(argv)


def _entry(fn):
    sys.exit(fn())


def run():
    _entry(run_main)


def arena():
    _entry(arena_main)


def bench():
    _entry(bench_main)
