import numpy as np
import pytest
from hypothesis import settings

from fedleak import data

settings.register_profile("fedleak", deadline=None, max_examples=50)
settings.load_profile("fedleak")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_clients():
    """20 speakers x 30 utterances, 24 features, normalised and cut into 3 shards each."""
    cfg = data.SynthConfig(num_speakers=20, utterances_per_speaker=30, feature_dim=24, seed=7)
    clients, _ = data.synth_generate(cfg)
    clients = data.znorm_per_speaker(clients)
    return data.shard_speakers(clients, 3, np.random.default_rng(0))


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
