import re

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict[int, tuple[str, str, list[str]]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m or (report.when != "call" and not report.failed):
        return
    n, name = int(m.group(1)), m.group(2).replace("_", " ")
    notes = [str(v) for k, v in report.user_properties if k == "note"]
    _results[n] = (name, "PASS" if report.passed else "FAIL", notes)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        name, verdict, notes = _results[n]
        terminalreporter.write_line(f"criterion {n:2d} {name}: {verdict}")
        for note in notes:
            terminalreporter.write_line(f"    {note}")
