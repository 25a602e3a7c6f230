from collections import defaultdict

import pytest

_CRITERIA: dict[int, list[tuple[str, bool, str]]] = defaultdict(list)


@pytest.fixture
def criterion():
    """Record ``criterion(number, part, ok, detail)``; the terminal summary
    prints one PASS/FAIL line per criterion number."""

    def record(number: int, part: str, ok: bool, detail: str) -> bool:
        _CRITERIA[number].append((part, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        parts = _CRITERIA[number]
        verdict = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {verdict}")
        for part, ok, detail in parts:
            terminalreporter.write_line(f"    [{'ok' if ok else 'FAIL'}] {part}: {detail}")
