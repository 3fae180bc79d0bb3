import numpy as np
import pytest

from mat.tensor import Tensor

# criterion number -> [title, all passed so far, notes]
CRITERIA = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = CRITERIA.setdefault(number, [title, True, []])
    if rep.outcome != "passed":
        entry[1] = False
        entry[2].append(f"FAILED {item.name}")
    if rep.when == "call":
        entry[2] += [f"{k}={v}" for k, v in rep.user_properties]


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, ok, notes = CRITERIA[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if notes:
            line += f"  [{'; '.join(notes)}]"
        terminalreporter.write_line(line)
