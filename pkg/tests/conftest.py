import pytest
import torch

from fscd.datamodel import SyntheticSceneSpec, generate_synthetic

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def synthetic_small():
    return generate_synthetic(SyntheticSceneSpec(num_images=6, seed=123))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
