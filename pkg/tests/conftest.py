import sys

import pytest

from ghzsource.config import load_config, source_config
from ghzsource.source import CoincidenceModel


@pytest.fixture(scope="session")
def calibrated_model():
    return CoincidenceModel(source_config(load_config()))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
