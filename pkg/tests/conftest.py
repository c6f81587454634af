import pytest

VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance criterion; the lines are echoed in the terminal summary."""
    store = request.config.stash.setdefault(VERDICTS, [])

    def record(number, title, checks):
        ok = all(passed for _, passed, _ in checks)
        detail = "; ".join(f"{name}: {'ok' if passed else 'FAILED'} ({info})" for name, passed, info in checks)
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]"
        store.append((number, line))
        print(line)
        return ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
