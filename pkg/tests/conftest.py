import logging

import pytest

from jointscan.simulate import SimConfig, simulate_dataset

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("jointscan").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def small_ds():
    return simulate_dataset(SimConfig(n=120, seed=7))


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    number, title = props["criterion"]
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
    detail = props.get("detail", "")
    if number in _CRITERIA:
        # a criterion split over several tests fails if any part fails
        _, old, old_detail = _CRITERIA[number]
        status = max(old, status, key=("PASS", "SKIP", "FAIL").index)
        detail = "; ".join(d for d in (old_detail, detail) if d)
    _CRITERIA[number] = (title, status, detail)


def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))

