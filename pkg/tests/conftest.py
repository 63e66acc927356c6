"""Session hooks: acceptance-criterion summary lines and a MetricReport audit."""

import pytest

from alsprog import core

# every MetricReport successfully constructed while the suite runs
REPORTS = []
_post_init = core.MetricReport.__post_init__


def _recording_post_init(self):
    _post_init(self)
    REPORTS.append(self)


core.MetricReport.__post_init__ = _recording_post_init

RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    failed = rep.failed or (rep.when == "call" and rep.skipped)
    prev = RESULTS.get(n, (title, True, ""))
    if rep.when == "call" or failed:
        detail = getattr(item, "criterion_detail", "")
        RESULTS[n] = (title, prev[1] and not failed, detail or prev[2])


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}"
        tr.write_line(line + (f": {detail}" if detail else ""))
    bad = [r for r in REPORTS if not r.mae <= r.rmse]
    tr.write_line(
        f"metric audit: {len(REPORTS)} MetricReports built in this session, {len(bad)} with mae > rmse"
    )
