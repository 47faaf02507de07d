import pytest

_outcomes: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(key, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    key = getattr(report, "criterion", None)
    if key is None:
        return
    slot = _outcomes.setdefault(key[0], {"title": key[1], "ok": True, "seen": False})
    if report.when == "call" or report.failed or report.skipped:
        slot["seen"] = True
        slot["ok"] = slot["ok"] and report.passed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_outcomes, key=lambda k: int(k[1:])):
        slot = _outcomes[key]
        verdict = "PASS" if slot["ok"] and slot["seen"] else "FAIL"
        terminalreporter.write_line(f"{key:>4} {verdict}  {slot['title']}")
