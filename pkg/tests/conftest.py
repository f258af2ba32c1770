import pytest

# criterion number -> list of "PASS ..." / "FAIL ..." lines, filled by test_acceptance
ACCEPTANCE: dict[int, list[str]] = {}


@pytest.fixture
def record():
    def _record(criterion: int, ok: bool, detail: str, soft: bool = False) -> None:
        if soft:
            status = ("PASS" if ok else "OUTSIDE BAND") + " (soft, not gated)"
        else:
            status = "PASS" if ok else "FAIL"
        line = f"criterion {criterion:2d}: {status}  {detail}"
        ACCEPTANCE.setdefault(criterion, []).append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        for line in ACCEPTANCE[n]:
            terminalreporter.write_line(line)
