import numpy as np
import pytest

# acceptance criterion number -> (title, outcome, detail)
_ACCEPTANCE: dict[int, list] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record(request):
    """Attach a measured-value summary to the current acceptance test."""
    marker = request.node.get_closest_marker("criterion")

    def _record(detail: str):
        if marker is not None:
            _ACCEPTANCE.setdefault(marker.args[0], [marker.args[1], None, ""])[2] = detail
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = _ACCEPTANCE.setdefault(marker.args[0], [marker.args[1], None, ""])
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry[1] = "PASS" if rep.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, outcome, detail = _ACCEPTANCE[n]
        line = f"[{outcome or 'NOT RUN'}] criterion {n:2d}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
