import pytest

# (criterion number, passed, detail) tuples filled in by test_acceptance.py
ACCEPTANCE_RESULTS = []


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        ACCEPTANCE_RESULTS.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
