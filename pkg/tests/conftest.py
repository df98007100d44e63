import pytest

ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the terminal summary prints them in order."""
    def record(key: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[key] = f"{key} {'PASS' if ok else 'FAIL'}: {detail}"
        print(ACCEPTANCE[key])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        terminalreporter.write_line(ACCEPTANCE[key])
