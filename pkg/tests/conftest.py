"""Shared pytest hooks: the acceptance suite reports one line per criterion."""

import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record ``criterion(n, ok, text)``; the line is printed now and in the terminal summary."""
    store = request.config.stash.setdefault(_LINES, {})

    def record(n: int, ok: bool, text: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}"
        store[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    store = config.stash.get(_LINES, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for n in sorted(store):
            terminalreporter.write_line(store[n])
