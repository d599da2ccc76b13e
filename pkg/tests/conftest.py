"""Per-criterion pass/fail summary for the acceptance tests."""
import pytest

CRITERIA = {
    1: "oracle agreement",
    2: "consistency residual",
    3: "gradient correctness",
    4: "telescoping identity",
    5: "reward-scale robustness",
    6: "noisy/negative data",
    7: "sparse-reward credit assignment",
    8: "decoding correctness",
    9: "determinism",
}

_outcomes = {}
_details = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


def pytest_runtest_logreport(report):
    ids = [v for k, v in report.user_properties if k == "criterion"]
    if not ids:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(ids[0], []).append(report.outcome == "passed")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


@pytest.fixture
def detail(request):
    """Attach a short result string to the criterion line of this test."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        _details.setdefault(mark.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in _outcomes:
            continue
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        line = f"criterion {n} ({name}): {status}"
        if _details.get(n):
            line += "  [" + "; ".join(_details[n]) + "]"
        terminalreporter.write_line(line)
