from __future__ import annotations

import pytest

from cival.gateway import Gateway, GeneratorConfig
from cival.simworld import make_additive_world, make_threshold_world


@pytest.fixture(scope="session")
def additive_build():
    return make_additive_world(n_samples=25, seed=7, max_contexts=8)


@pytest.fixture(scope="session")
def threshold_build():
    return make_threshold_world(n_samples=30, seed=11)


@pytest.fixture()
def sim_gateway(additive_build):
    return Gateway(GeneratorConfig(backend="simulated"), world=additive_build.world)


@pytest.fixture()
def threshold_gateway(threshold_build):
    return Gateway(GeneratorConfig(backend="simulated"), world=threshold_build.world)
