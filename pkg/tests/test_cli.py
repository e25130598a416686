import io
import os
import subprocess
import sys

import pytest

from cmpi.cli import arena_main


def arena(path, *argv):
    out = io.StringIO()
    code = arena_main(["--device", path, *argv], out=out)
    return code, out.getvalue()


def test_format_ls_create_stat_unlink(device_path, capsys):
    code, out = arena(device_path, "--device-size", "1M", "format", "--level-cap", "101", "--levels", "3")
    assert code == 0
    assert "slots=" + str(101 + 97 + 89) in out
    assert arena(device_path, "ls") == (0, "")
    code, out = arena(device_path, "create", "alpha", "100")
    assert (code, out) == (0, "alpha\t0\t128\n")
    code, out = arena(device_path, "ls")
    assert out.startswith("alpha\t0\t128\tslot=")
    code, out = arena(device_path, "stat", "alpha")
    assert "size: 128" in out and "owner: 0" in out
    assert arena(device_path, "unlink", "alpha")[0] == 0
    assert arena(device_path, "stat", "alpha")[0] == 1
    assert "no shared object" in capsys.readouterr().err


def test_errors(device_path, capsys):
    tiny = device_path + ".tiny"
    try:
        assert arena(tiny, "--device-size", "4K", "format")[0] == 1
        assert "cannot hold" in capsys.readouterr().err
        assert arena(tiny, "--device-size", "1M", "ls")[0] == 1
        assert "holds 4096 bytes" in capsys.readouterr().err
    finally:
        os.unlink(tiny)
    arena(device_path, "--device-size", "1M", "format", "--level-cap", "101", "--levels", "3")
    assert arena(device_path, "format", "--level-cap", "97", "--levels", "3")[0] == 1
    assert arena(device_path, "format", "--level-cap", "97", "--levels", "3", "--force")[0] == 0
    assert arena(device_path, "create", "x", "64")[0] == 0
    assert arena(device_path, "create", "x", "64")[0] == 1


def test_device_required(monkeypatch):
    monkeypatch.delenv("CMPI_DEVICE", raising=False)
    with pytest.raises(SystemExit):
        arena_main(["ls"])


def test_unformatted(device_path, capsys):
    assert arena(device_path, "--device-size", "1M", "ls")[0] == 1
    assert "not formatted" in capsys.readouterr().err


def test_console_scripts_installed():
    for prog in ("cmpi-run", "cmpi-arena", "cmpi-bench"):
        res = subprocess.run([prog, "--help"], capture_output=True, text=True)
        assert res.returncode == 0, prog
        assert "usage" in res.stdout


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cmpi.bench", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
