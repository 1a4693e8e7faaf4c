from __future__ import annotations

import random
from pathlib import Path

import pytest

from propgraph.client import HashingEmbedder

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng() -> random.Random:
    return random.Random(1234)


@pytest.fixture
def embedder() -> HashingEmbedder:
    return HashingEmbedder(256)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


# -- acceptance summary ---------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed
    if report.when == "call" or failed:
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = "FAIL" if failed else "PASS"
        if number not in _ACCEPTANCE or status == "FAIL":
            _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
