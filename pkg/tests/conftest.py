import sys

import numpy as np
import pytest

from sentinet import data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """40 synthetic images at mini scale, classes alternating."""
    out = tmp_path_factory.mktemp("tiny")
    data.synth_dataset(40, 63, 7, out)
    return out / "manifest.csv"


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    report = getattr(module, "REPORT", None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report):
        terminalreporter.write_line(report[number])
