import pytest
import torch

from padtok.config import ExperimentConfig, PhaseConfig
from padtok.data import generate_synthetic_dataset

torch.set_num_threads(1)


def tiny_config(**overrides) -> ExperimentConfig:
    """Small enough for unit tests: two blocks each side, width 32."""
    base = dict(embed_dim=32, heads=2, encoder_depth=2, decoder_depth=2, codebook_size=64,
                train=PhaseConfig(steps=4, batch_size=8), finetune=PhaseConfig(steps=4, batch_size=8))
    base.update(overrides)
    return ExperimentConfig(**base).validate()


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(48, 4, 3)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
