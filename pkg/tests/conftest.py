import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(criterion: str, passed: bool, detail: str, reported_only: bool = False):
        status = "PASS" if passed else ("FAIL (reported)" if reported_only else "FAIL")
        line = f"criterion {criterion}: {status} | {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
