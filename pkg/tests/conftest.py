import numpy as np
import pytest

from dramflip.dram import ChipGeometry, VulnerabilityConfig, generate_chip
from dramflip.qnn import VICTIM_RECIPE, make_dataset, mlp_spec, quantize, train_float


@pytest.fixture(scope="session")
def default_chip():
    """The default 1 x 128 x 1024 chip, seed 0.  Treat as read-only; clone before mutating."""
    return generate_chip()


@pytest.fixture
def small_chip():
    """A 16-row, 64-bit chip with dense vulnerabilities, fresh per test."""
    cfg = VulnerabilityConfig(rh_cell_density=0.05, rp_cell_density=0.2, seed=3)
    return generate_chip(ChipGeometry(1, 16, 64), config=cfg)


@pytest.fixture(scope="session")
def blobs():
    return make_dataset("blobs", 10, 2000, seed=0)


@pytest.fixture(scope="session")
def victim(blobs):
    """Quantized 32-64-64-10 MLP trained with the standard victim recipe."""
    train, test = blobs
    model = train_float(mlp_spec(32, [64, 64], 10), train, seed=0, test=test, **VICTIM_RECIPE)
    return quantize(model, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
