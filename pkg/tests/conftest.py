import os
import sys
from collections import defaultdict

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS = defaultdict(list)  # criterion number -> [(test name, passed, detail)]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _RESULTS[marker.args[0]].append((item.name, rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        runs = _RESULTS[n]
        ok = all(passed for _, passed, _ in runs)
        details = " | ".join(d for _, _, d in runs if d)
        failed = [name for name, passed, _ in runs if not passed]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({len(runs)} test(s))"
        if failed:
            line += f" failing: {', '.join(failed)}"
        if details:
            line += f" -- {details}"
        terminalreporter.write_line(line)
