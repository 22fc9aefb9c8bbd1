import numpy as np
import pytest
import torch

from kdlab.model import ModelConfig, StudentModel
from kdlab.oracle import (CHOICE, DETERMINISTIC, Example, OracleSpec, StateSpec,
                          sample_example)
from kdlab.vocab import EOS


def choice_state(candidates, probs, role="choice"):
    return StateSpec(CHOICE, tuple(candidates), tuple(probs), role=role)


def det_state(token, role="filler"):
    return StateSpec(DETERMINISTIC, (token,), (1.0,), role=role)


def make_mini_oracle(layout, length, domain="dialogue"):
    """Small oracle for engine tests: ``layout`` maps position -> StateSpec."""
    schedule = []
    filler = iter(range(40, 64))
    for t in range(length - 1):
        schedule.append(layout.get(t) or det_state(next(filler)))
    schedule.append(det_state(EOS, role="eos"))
    decisions = tuple(sorted(layout))
    return OracleSpec(domain=domain, template_length=length,
                      schedule=tuple(schedule), decision_positions=decisions)


MINI_ORACLES = {
    "two_mid": lambda: make_mini_oracle({
        1: choice_state((3, 4, 5), (0.6, 0.3, 0.1)),
        3: choice_state((8, 9), (0.75, 0.25)),
    }, length=6),
    "three_spread": lambda: make_mini_oracle({
        0: choice_state((3, 4), (0.9, 0.1)),
        3: choice_state((6, 7, 8), (0.5, 0.3, 0.2)),
        6: choice_state((10, 11, 12), (0.8, 0.15, 0.05)),
    }, length=8),
    "late_choice": lambda: make_mini_oracle({
        2: choice_state((3, 4, 5), (0.45, 0.35, 0.2)),
        5: choice_state((7, 8), (0.5, 0.5)),
        6: choice_state((10, 11), (0.99, 0.01)),
    }, length=8),
}


@pytest.fixture(params=sorted(MINI_ORACLES))
def mini_oracle(request):
    return MINI_ORACLES[request.param]()


@pytest.fixture
def tiny_config():
    return ModelConfig(layers=2, model_width=16, heads=2, ffn_width=32,
                       dropout_rate=0.1, max_positions=16)


@pytest.fixture
def tiny_model64(tiny_config):
    return StudentModel(tiny_config, seed=11, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


def mini_example(spec, seed=3):
    return sample_example(spec, seed)
