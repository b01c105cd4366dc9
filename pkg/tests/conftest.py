import numpy as np
import pytest

from voxelser.checks import toy_grid
from voxelser.synth import generate, room_scene

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line for the acceptance summary."""

    def record(name, passed, detail=""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def room():
    return generate(room_scene())


@pytest.fixture
def small_grid():
    return toy_grid(0, dims=(4, 4, 4), n_occupied=32, channels=8)
