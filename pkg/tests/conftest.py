import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
ROOT = TESTS.parent
sys.path.insert(0, str(TESTS))

_criteria: dict[int, tuple[str, str]] = {}


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
    if failed:
        _criteria[n] = (title, "FAIL")
    elif rep.when == "call" and n not in _criteria:
        _criteria[n] = (title, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"{status} criterion {n:2d}: {title}")
    passed = sum(s == "PASS" for _, s in _criteria.values())
    terminalreporter.write_line(f"{passed}/{len(_criteria)} criteria passed")


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    """One scripted pipeline run on the bundled demo config, shared across tests."""
    import time

    from worldqa.cli import main

    out = tmp_path_factory.mktemp("demo")
    t0 = time.perf_counter()
    code = main(["pipeline", "--config", str(ROOT / "configs" / "demo_pipeline.json"), "--out", str(out)])
    return {"out": out, "code": code, "seconds": time.perf_counter() - t0}
