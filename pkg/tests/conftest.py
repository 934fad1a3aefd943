import numpy as np
import pytest

from tggat.config import Config
from tggat.env import EnvConfig, generate_dataset
from tggat.language import Vocabulary

# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(':'))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def env_cfg():
    return EnvConfig()


@pytest.fixture(scope="session")
def small_data(env_cfg):
    return generate_dataset(3, 12, 7, env_cfg)


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary.default()


@pytest.fixture
def tiny_cfg():
    return Config(d_model=16, n_heads=2, n_text_layers=1, n_gat_layers=2, ffn_mult=2, batch_size=2,
                  max_iterations=3, eval_interval=2, eval_episodes=4, aug_p=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
