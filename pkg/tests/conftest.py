from __future__ import annotations

import numpy as np
import pytest

from actbit.model import DESIGNATED_TAGS, Layer, PolicyModel, channels
from actbit.simenv import EnvConfig, make_calibration, reference_policy

FIXTURE_SEED = 0
CALIB_SEED = 1

_criteria: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2} {name}"
    if detail:
        line += f" -- {detail}"
    _criteria.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def env_cfg() -> EnvConfig:
    return EnvConfig()


@pytest.fixture(scope="session")
def policy(env_cfg) -> PolicyModel:
    return reference_policy(env_cfg, FIXTURE_SEED)


@pytest.fixture(scope="session")
def calib(env_cfg, policy):
    return make_calibration(env_cfg, policy, 512, CALIB_SEED)


@pytest.fixture(scope="session")
def small_calib(env_cfg, policy):
    return make_calibration(env_cfg, policy, 64, CALIB_SEED)


@pytest.fixture(scope="session")
def designated(policy):
    return channels(policy, DESIGNATED_TAGS)


def random_net(rng: np.random.Generator, dims, activations, tags=None) -> PolicyModel:
    """Random chain with the given layer widths and hidden activations (action layer is identity)."""
    layers = []
    n = len(dims) - 1
    for k in range(n):
        act = "identity" if k == n - 1 else activations[k % len(activations)]
        tag = tags[k] if tags else ("action_head" if k == n - 1 else "backbone")
        w = rng.normal(0, 1 / np.sqrt(dims[k]), size=(dims[k + 1], dims[k]))
        b = rng.normal(0, 0.1, size=dims[k + 1])
        layers.append(Layer(w, b, act, tag))
    return PolicyModel(tuple(layers))
