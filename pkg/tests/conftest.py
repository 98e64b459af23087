import pytest

_CRITERIA = {}


class CriterionReport:
    """Collects sub-check outcomes; the terminal summary prints one line per criterion."""

    def check(self, k, ok, detail):
        _CRITERIA.setdefault(k, []).append((bool(ok), detail))
        return bool(ok)


@pytest.fixture(scope="session")
def criterion():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        checks = _CRITERIA[k]
        verdict = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        details = "; ".join(("" if ok else "[fail] ") + d for ok, d in checks)
        terminalreporter.write_line(f"{verdict} criterion {k}: {details}")
