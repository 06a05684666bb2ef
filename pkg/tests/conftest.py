import re

import pytest

from helpers import SMALL
from unifyedit import make_toy_backend


@pytest.fixture(scope="session")
def toy():
    return make_toy_backend(0)


@pytest.fixture(scope="session")
def small_toy():
    return make_toy_backend(3, SMALL)


_CRIT = re.compile(r"test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRIT.search(getattr(rep, "nodeid", ""))
            if m and rep.when == "call" or (m and outcome == "error"):
                lines.append((int(m.group(1)), m.group(2).replace("_", " "),
                              "PASS" if outcome == "passed" else "FAIL", getattr(rep, "duration", 0.0)))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, verdict, dur in sorted(lines):
        terminalreporter.write_line(f"[{verdict}] criterion {n}: {title} ({dur:.2f}s)")
