from __future__ import annotations

import numpy as np
import pytest

from dymesh.tensor import Rng

# criterion number -> (title, list of outcomes)
_CRITERIA: dict[int, tuple[str, list[bool]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        number, title = marker.args
        _CRITERIA.setdefault(number, (title, []))[1].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, results = _CRITERIA[number]
        status = "PASS" if results and all(results) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title} ({sum(results)}/{len(results)} checks)")


@pytest.fixture
def rng() -> Rng:
    return Rng(1234)


def assert_close(a, b, tol=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape, (a.shape, b.shape)
    err = float(np.abs(a - b).max()) if a.size else 0.0
    assert err <= tol, f"max abs error {err:.3g} > {tol:.3g}"
