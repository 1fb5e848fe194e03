import pytest


def pytest_configure(config):
    config.acceptance_results = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    results = request.config.acceptance_results

    def record(n, ok, detail):
        results[n] = (None if ok is None else bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "acceptance_results", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        status = "INFO" if ok is None else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call" or not rep.failed or not item.name.startswith("test_criterion_"):
        return
    n = int(item.name.split("_")[2])
    results = item.config.acceptance_results
    if results.get(n, (True,))[0] is not False:
        results[n] = (False, f"assertion failed: {call.excinfo.value!r}"[:300])
