import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        request.config.stash.setdefault(_RESULTS, []).append(line)
        with capsys.disabled():
            print(f"\n[acceptance] {line}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
