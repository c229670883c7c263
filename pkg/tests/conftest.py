import numpy as np
import pytest
import torch

from dck.config import tiny_config
from dck.gradcheck import synthetic_model

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    model, vocab = synthetic_model(tiny_config())
    return model, vocab


@pytest.fixture
def detail(request):
    """Attach a measured value to the current test's acceptance verdict line."""
    def add(text):
        request.node.user_properties.append(("detail", text))
    return add


# one verdict line per acceptance criterion, keyed by the ``criterion`` marker
_VERDICTS: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.skipped or report.failed):
        return
    if report.skipped:
        status = "SKIP"
        detail = report.longrepr[-1] if isinstance(report.longrepr, tuple) else ""
    else:
        status = "PASS" if report.passed else "FAIL"
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    line = f"criterion {marker.args[0]:>2}: {status} {detail}".rstrip()
    _VERDICTS[marker.args[0]] = line


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
