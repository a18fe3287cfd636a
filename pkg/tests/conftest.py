from __future__ import annotations

import pytest

_RESULTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Record an acceptance criterion outcome, printed in the terminal summary."""

    def _record(name: str, ok: bool, detail: str = "") -> bool:
        _RESULTS[name] = (bool(ok), detail)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS):
        ok, detail = _RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
