import numpy as np
import pytest

from gsde.g_driver import VolatilityBand, make_control, simulate_driver, uniform_grid


@pytest.fixture
def band():
    return VolatilityBand(0.5, 1.0)


@pytest.fixture
def driver(band):
    control = make_control("bang_bang_random", band, uniform_grid(1.0, 200), seed=3)
    return simulate_driver(control, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(20261017)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, label): acceptance criterion reported in the summary")


_OUTCOMES = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and not report.failed):
        return
    n, label = mark.args
    entry = _OUTCOMES.setdefault(n, {"label": label, "ok": True, "notes": []})
    entry["ok"] = entry["ok"] and report.passed
    entry["notes"].extend(f"{k}={v}" for k, v in report.user_properties)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        e = _OUTCOMES[n]
        status = "PASS" if e["ok"] else "FAIL"
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"[{n:2d}] {status} {e['label']}" + (f" ({notes})" if notes else ""))
