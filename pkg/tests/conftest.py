import numpy as np
import pytest

from selfbc.dataset import compute_norm_stats, generate_dataset, sample_batch
from selfbc.envs import BehaviorSpec
from selfbc.rng import make_stream
from selfbc.trainers import desk_config, init_trainer_state, normalized_copy

ACCEPTANCE_LINES = []


def record_acceptance(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(BehaviorSpec.named("medium"), 2000, 0)


@pytest.fixture
def tiny_cfg():
    return desk_config(hidden_sizes=(8, 8), batch_size=16, n_bc=50, n_ebc=60, n_selfbc=60,
                       eval_every=20, eval_episodes=2, n_ens=1)


@pytest.fixture
def tiny_state(small_dataset, tiny_cfg):
    norm = compute_norm_stats(small_dataset)
    return init_trainer_state(4, 2, tiny_cfg, make_stream(3, "init"), norm)


@pytest.fixture
def tiny_batch(small_dataset, tiny_cfg):
    data = normalized_copy(small_dataset, compute_norm_stats(small_dataset))
    return sample_batch(data, make_stream(3, "sample"), tiny_cfg.batch_size)


def rel_err(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / scale)
