import numpy as np
import pytest

from elastic_kv import init_model
from elastic_kv.model import ModelConfig

_ACCEPTANCE: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        n, title = marker.args
        entry = _ACCEPTANCE.setdefault(n, {"title": title, "failed": [], "parts": 0})
        entry["parts"] += 1
        if not report.passed:
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        e = _ACCEPTANCE[n]
        status = "FAIL" if e["failed"] else "PASS"
        detail = f" (failed: {', '.join(e['failed'])})" if e["failed"] else ""
        terminalreporter.write_line(f"[{status}] criterion {n}: {e['title']}{detail}")


@pytest.fixture(scope="session")
def model():
    return init_model(ModelConfig())


@pytest.fixture(scope="session")
def small_model():
    return init_model(ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, max_seq=128, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
