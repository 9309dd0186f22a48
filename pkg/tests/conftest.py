"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Callable that attaches a one-line measurement summary to the current criterion."""
    parts = []
    request.node.user_properties.append(("detail", parts))
    return parts.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    parts = next((v for k, v in item.user_properties if k == "detail"), [])
    _VERDICTS[marker.args[0]] = ("PASS" if rep.passed else "FAIL", "; ".join(parts))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        status, text = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({text})" if text else ""))
