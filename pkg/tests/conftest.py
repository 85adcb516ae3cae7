import pytest

# criterion number -> [(ok, detail)], filled by the acceptance tests
CRITERIA = {}


@pytest.fixture
def criterion():
    def record(n, ok, detail):
        CRITERIA.setdefault(n, []).append((bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        parts = CRITERIA[n]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {verdict}  " +
                                    "; ".join(d for _, d in parts))
