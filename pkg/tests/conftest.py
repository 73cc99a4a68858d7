"""Shared pytest plumbing: a per-criterion PASS/FAIL summary section.

Acceptance tests register one line each through the `criterion` fixture;
the lines are echoed verbatim after the normal test report so the outcome
of every release gate is visible in one place regardless of verbosity or
output capture settings.
"""

import pytest


def pytest_configure(config):
    config._criterion_lines = []


@pytest.fixture
def criterion(request):
    """Record a single '[ID] PASS/FAIL - detail' line for the run summary."""

    def record(cid: str, ok: bool, detail: str) -> bool:
        line = f"[{cid}] {'PASS' if ok else 'FAIL'} - {detail}"
        request.config._criterion_lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
