import pytest

verdicts_key = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[verdicts_key] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the outcome."""
    lines = request.config.stash[verdicts_key]

    def record(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(verdicts_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
