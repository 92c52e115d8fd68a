import pytest

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        return passed
    return record
