# tests/conftest.py
from __future__ import annotations

from typing import List

import numpy as np
import pytest

from gridmin import settings as settings_module
from gridmin.network import PowerNetwork, load_bundled_network
from gridmin.objective import EvaluationContext
from gridmin.optimizer import OptimizerConfig

# interior points of the 12-node supply polytope used across the suite
INTERIOR_POINTS: List[List[float]] = [
    [23.0, 19.0, 24.0],
    [20.0, 18.0, 22.0],
    [21.0, 20.0, 21.0],
    [18.0, 22.0, 23.0],
    [22.0, 21.0, 19.0],
]


@pytest.fixture(autouse=True)
def no_user_settings(monkeypatch: pytest.MonkeyPatch) -> None:
    """
    Keep settings.json files on the machine out of the tests.
    """
    monkeypatch.setattr(settings_module, "SETTINGS_LOCATIONS", [])


@pytest.fixture(scope="session")
def two_ring() -> PowerNetwork:
    return load_bundled_network("two_ring_12")


@pytest.fixture
def ctx(two_ring: PowerNetwork) -> EvaluationContext:
    return EvaluationContext(two_ring, r=1.0)


@pytest.fixture
def toy_network() -> PowerNetwork:
    """
    Two supply nodes feeding one demand node over two equal lines.

    The decision variable is p1 in [0, 10]; the lines carry p1/20 and
    (10 - p1)/20, so f has its kink minimum at p1 = 5.
    """
    return PowerNetwork.from_arrays(
        edges=[(1, 3), (2, 3)],
        weights=[20.0, 20.0],
        inertias=[1.0, 1.0, 1.0],
        dampings=[1.0, 1.0, 1.0],
        noise=[1.0, 1.0, 1.0],
        p_max=[10.0, 10.0],
        p_demand=[10.0],
        name="toy",
    )


@pytest.fixture
def toy_ctx(toy_network: PowerNetwork) -> EvaluationContext:
    return EvaluationContext(toy_network, r=1.0)


@pytest.fixture
def zero_flow_network() -> PowerNetwork:
    """
    Triangle with a weak line between the two supply nodes.

    At p1 = 0.005 both supplies deliver the same share, the weak line (1, 2)
    carries nothing and is still the maximizer because its deviation is
    the largest.
    """
    return PowerNetwork.from_arrays(
        edges=[(1, 2), (1, 3), (2, 3)],
        weights=[0.5, 5.0, 5.0],
        inertias=[1.0, 1.0, 1.0],
        dampings=[1.0, 1.0, 1.0],
        noise=[1.0, 1.0, 1.0],
        p_max=[0.01, 0.01],
        p_demand=[0.01],
        name="zero_flow",
    )


@pytest.fixture
def zero_flow_ctx(zero_flow_network: PowerNetwork) -> EvaluationContext:
    return EvaluationContext(zero_flow_network, r=1.0)


@pytest.fixture
def fast_config() -> OptimizerConfig:
    return OptimizerConfig(r=1.0, inner_iters=200, init_iters=40, max_iters=200)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
