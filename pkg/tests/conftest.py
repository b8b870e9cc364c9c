import numpy as np
import pytest

from deepreg.data_io import SyntheticConfig, generate_synthetic, synthetic_layout

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SyntheticConfig(P=3, sample_count=6, seed=3)
    return generate_synthetic(cfg), synthetic_layout(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
