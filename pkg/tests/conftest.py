import numpy as np
import pytest

from moshpit_lab.core import Rng


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture
def rng():
    return Rng(7, "tests")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in sorted(RESULTS.items(), key=lambda kv: (int(kv[0].split()[0].rstrip("abcd")), kv[0])):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
