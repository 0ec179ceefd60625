import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from nada.embedding import MockBackend  # noqa: E402
from nada.generator import GeneratorConfig, StyleGenerator  # noqa: E402
from helpers import ACCEPTANCE_LINES  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_generator():
    return StyleGenerator(GeneratorConfig(), seed=0)


@pytest.fixture
def G(toy_generator):
    import copy
    return copy.deepcopy(toy_generator)


@pytest.fixture
def mock():
    gen = torch.Generator().manual_seed(11)
    table = {p: torch.randn(16, generator=gen, dtype=torch.float64).numpy()
             for p in ("Dog", "Cat", "Photo", "Sketch", "A", "B")}
    return MockBackend(seed=1, dimension=16, text_table=table)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
