import numpy as np
import pytest

from adsnet.datagen import SyntheticSpec, generate
from adsnet.trainer import TrainConfig, TrainData

TINY_SPEC = SyntheticSpec(n_internal=3000, n_external=4000, vocab_sizes=(60, 6, 5, 5, 5, 5),
                          shift=1.0, noise_fraction=0.5)
TINY_CONFIG = TrainConfig(warmup_steps=20, total_steps=30, sync_frequency=10, batch_size=32,
                          external_microbatch=16, embedding_dim=3, expert_hidden=(6,),
                          tower_hidden=4, k_experts=2, k_segments=4)


def tiny_data(seed=0):
    spec = TINY_SPEC.replace(seed=seed)
    split = generate(spec)
    internal = split.train.internal()
    external = split.train.external_only()
    return (spec.schema(TINY_CONFIG.embedding_dim), TrainData(internal.X, internal.ltv),
            TrainData(external.X, external.ltv), split)


@pytest.fixture(scope="session")
def tiny():
    return tiny_data(0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
