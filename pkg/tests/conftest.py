from pathlib import Path

import pytest

GOLDEN = Path(__file__).parent / "golden"
_CRITERIA: dict[int, dict] = {}


@pytest.fixture(scope="session")
def golden_dir() -> Path:
    return GOLDEN


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "details": [], "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if not rep.passed:
        entry["ok"] = False
        entry["details"].append(f"{item.name} {rep.when} {rep.outcome}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        status = "PASS" if entry["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {'; '.join(entry['details'])}")
