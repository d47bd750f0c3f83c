from __future__ import annotations

import pytest
import torch


@pytest.fixture(autouse=True)
def _restore_default_dtype():
    prev = torch.get_default_dtype()
    yield
    torch.set_default_dtype(prev)


CRITERIA = {
    1: "gradient correctness",
    2: "SSI invariance",
    3: "brute-force oracle equivalence",
    4: "gather/all-reduce equivalence",
    5: "collapse sentinel",
    6: "analytics exactness",
    7: "toy end-to-end learning",
    8: "expansion-path trend",
    9: "determinism and checkpoint fidelity",
}
_outcomes: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    if rep.failed:
        _outcomes[n] = "FAIL"
    elif rep.when == "call" and rep.passed:
        _outcomes.setdefault(n, "PASS")
    elif rep.skipped:
        _outcomes.setdefault(n, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        terminalreporter.write_line(f"criterion {n} ({name}): {_outcomes.get(n, 'NOT RUN')}")
