import os
import uuid

import pytest

from cmpi.arena import Arena, HashGeometry, arena_format
from cmpi.device import COHERENT, INCOHERENT, DeviceConfig, device_open

SMALL = 8 << 20
SMALL_GEOMETRY = HashGeometry.from_cap(997, 4)
SHM = "/dev/shm" if os.path.isdir("/dev/shm") else None


@pytest.fixture
def device_path(tmp_path):
    """A fresh backing-file path, in /dev/shm when available so mmap stays in RAM."""
    if SHM is None:
        path = str(tmp_path / "device.img")
    else:
        path = os.path.join(SHM, f"cmpi-test-{uuid.uuid4().hex}.img")
    yield path
    try:
        os.unlink(path)
    except FileNotFoundError:
        pass


@pytest.fixture(params=[COHERENT, INCOHERENT])
def mode(request):
    return request.param


@pytest.fixture
def region(device_path, mode):
    r = device_open(DeviceConfig(device_path, SMALL, mode))
    yield r
    r.close()


@pytest.fixture
def arena(region):
    arena_format(region, SMALL_GEOMETRY)
    return Arena(region)


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(__import__("sys").modules.items()) if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=str):
            terminalreporter.write_line(results[key])
