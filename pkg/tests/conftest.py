from __future__ import annotations

import re

import pytest
from support import write_config

from gridq.config import load_config
from gridq.store import Store

_acceptance: dict[str, str] = {}


@pytest.fixture
def demo_config(tmp_path):
    return load_config(write_config(tmp_path))


@pytest.fixture
def store(demo_config):
    s = Store.connect(demo_config, create=True)
    s.create_table()
    yield s
    s.close()


@pytest.fixture
def db_path(tmp_path):
    return tmp_path / "study.db"


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid:
        return
    m = re.search(r"test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = f"criterion {int(m.group(1))} ({m.group(2).replace('_', ' ')})"
    if report.when == "call" or report.outcome == "failed":
        if _acceptance.get(key) != "FAIL":
            _acceptance[key] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance, key=lambda k: int(k.split()[1])):
        terminalreporter.write_line(f"{_acceptance[key]}  {key}")
