import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dcal", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dcal")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    n = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ok = report.passed and _VERDICTS.get(n, (True, ""))[0]
    if report.failed and not detail:
        crash = getattr(report.longrepr, "reprcrash", None)
        detail = crash.message.splitlines()[0] if crash else "error"
    prior = _VERDICTS.get(n, (True, ""))[1]
    _VERDICTS[n] = (ok, "; ".join(d for d in (prior, detail) if d))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
