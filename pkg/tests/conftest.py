from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from mfglab.grid import build_grid, integrate_interior, partition_boundary

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

# (number, title) -> list of outcomes of the tests carrying that marker
_ACCEPTANCE: dict[tuple[int, str], list[bool]] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            _ACCEPTANCE.setdefault((int(mark.args[0]), str(mark.args[1])), [])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    key = (int(mark.args[0]), str(mark.args[1]))
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _ACCEPTANCE.setdefault(key, []).append(bool(rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), results in sorted(_ACCEPTANCE.items()):
        if not results:
            status = "NOT RUN"
        else:
            status = "PASS" if all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {num}: {status}  {title}")


def line_grid(nx: int = 64, nt: int = 128, T: float = 1.0, observed=("right",)):
    grid = build_grid([1.0], [nx], T, nt)
    return grid, partition_boundary(grid, list(observed))


def l2(f, grid) -> float:
    return float(np.sqrt(integrate_interior(np.asarray(f) ** 2, grid)))


@pytest.fixture
def grid1d():
    return line_grid()


@pytest.fixture
def small1d():
    return line_grid(17, 17)
