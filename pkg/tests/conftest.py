from pathlib import Path

import numpy as np
import pytest
import torch

from hipath.report import Vocabulary
from hipath.synthetic import Generator, GeneratorSpec, make_vocabulary

FIXTURES = Path(__file__).parent / "fixtures"

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def fixture_vocab() -> Vocabulary:
    return Vocabulary.load(FIXTURES / "vocab.json")


@pytest.fixture(scope="session")
def desk_vocab() -> Vocabulary:
    return make_vocabulary()


@pytest.fixture(scope="session")
def small_generator(desk_vocab) -> Generator:
    spec = GeneratorSpec(seed=3, n_cases=64, d_vis=16, d_txt=24, patches_per_image=(2, 6))
    return Generator(spec, desk_vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed again at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
