import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; the line is echoed in the terminal summary."""

    def record(name: str, ok: bool, detail: str = "", gated: bool = True) -> None:
        tag = ("PASS" if ok else "FAIL") if gated else ("SOFT-PASS" if ok else "SOFT-FAIL")
        line = f"{tag}  {name}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        if gated:
            assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
