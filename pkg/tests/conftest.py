import numpy as np
import pytest

from rfda.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    # R=1, F=16, L=1 keeps full-pipeline tests well under a second
    return ModelConfig(radius=1, features=16, kernel=3, blocks=1, preset="test")


def t64(rng, *shape, grad=False):
    from rfda.tensor import Tensor

    return Tensor(rng.standard_normal(shape), requires_grad=grad)


# acceptance lines, repeated at the end of the run so they show without -s
CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
