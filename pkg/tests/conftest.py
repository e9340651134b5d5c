import pytest

# filled by the acceptance tests: criterion number -> one summary line
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def acceptance_line():
    def record(number: int, title: str, ok: bool, detail: str, seconds: float, budget: float):
        within = seconds <= budget
        status = "PASS" if ok and within else "FAIL"
        line = (f"criterion {number} {status}  {title}: {detail}  "
                f"[{seconds:.1f}s of {budget:.0f}s budget{'' if within else ', OVER BUDGET'}]")
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok and within

    return record
