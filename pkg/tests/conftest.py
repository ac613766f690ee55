import pytest

_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record one checked part of an acceptance criterion: ``criterion(k, ok, detail)``."""
    table = request.config.stash[_KEY]

    def record(k, ok, detail):
        table.setdefault(k, []).append((bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(_KEY, {})
    if not table:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(table):
        parts = table[k]
        verdict = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {k}: {verdict}  {detail}")
