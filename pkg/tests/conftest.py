import re

from hypothesis import settings

# property tests draw the same examples on every run
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")

_criteria = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2))
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        _criteria[key] = _criteria.get(key, True) and not failed
        _criteria.setdefault(("detail", key), getattr(report, "user_properties", []))


def pytest_terminal_summary(terminalreporter):
    keys = sorted(k for k in _criteria if k[0] != "detail")
    if not keys:
        return
    terminalreporter.section("acceptance criteria")
    for key in keys:
        status = "PASS" if _criteria[key] else "FAIL"
        notes = dict(_criteria.get(("detail", key), []))
        extra = f"  ({notes['summary']})" if "summary" in notes else ""
        terminalreporter.write_line(f"C{key[0]} {key[1].replace('_', ' ')}: {status}{extra}")
