import copy
import json

import numpy as np
import pytest

from diba.sim import SimConfig, run_simulation

SMALL = dict(n_prompts=200, n_skills=20, epochs=8, seed=0)


def minimal_record(**over):
    rec = {
        "prompt_id": "p1",
        "prompt_text": "what is 2+2",
        "label": "member",
        "samples_ft": [{"text": "four", "reward": 1, "token_logprobs_ft": [-0.1, -0.2],
                        "token_logprobs_ref": [-0.3, -0.4], "source": "ft"}],
        "samples_ref": [{"text": "five", "reward": 0, "token_logprobs_ft": [-1.0],
                         "token_logprobs_ref": [-0.5], "source": "ref"}],
    }
    rec.update(over)
    return rec


@pytest.fixture
def record():
    return copy.deepcopy(minimal_record())


@pytest.fixture
def record_line(record):
    return json.dumps(record)


@pytest.fixture(scope="session")
def small_run():
    """A short simulator run shared by several test modules."""
    state, traces = run_simulation(SimConfig(**SMALL), checkpoints=(0, SMALL["epochs"]))
    return state, traces


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


DEFAULT_CHECKPOINTS = (0, 8, 15, 30)


@pytest.fixture(scope="session")
def default_run():
    """The default simulator configuration at seed 0 with trace checkpoints."""
    return run_simulation(SimConfig(), checkpoints=DEFAULT_CHECKPOINTS)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
