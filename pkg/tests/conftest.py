import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def f64():
    """Run the test body with float64 as the default dtype."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by this test")


def pytest_runtest_logreport(report):
    mark = getattr(report, "criterion", None)
    if mark is None or report.when != "call" and report.outcome != "failed":
        return
    n, title = mark
    entry = _criteria.setdefault(n, {"title": title, "failed": False})
    entry["failed"] |= report.outcome == "failed"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        terminalreporter.write_line(f"{'FAIL' if e['failed'] else 'PASS'} criterion {n}: {e['title']}")
