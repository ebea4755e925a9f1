import pathlib
import subprocess
import sys

import pytest

TUTORIALS = pathlib.Path(__file__).resolve().parent.parent / "tutorials"
SCRIPTS = sorted(p.name for p in TUTORIALS.glob("0*.py") if "tcp" not in p.name)


@pytest.mark.parametrize("script", SCRIPTS)
def test_tutorial_runs(script):
    res = subprocess.run([sys.executable, str(TUTORIALS / script)], capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert res.stdout.strip()


@pytest.mark.parametrize("backend", ["sim", "tcp"])
def test_launch_tutorial(backend):
    res = subprocess.run([sys.executable, "-m", "defog.transport.launcher", "-n", "4", "--backend", backend,
                          "--local-size", "2", "--timeout", "60", "--", str(TUTORIALS / "07_tcp_launch.py")],
                         capture_output=True, text=True, timeout=90)
    assert res.returncode == 0, res.stderr
    assert sorted(res.stdout.splitlines()).count("rank 0: hierarchical 1.500") == 1
