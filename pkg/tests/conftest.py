from __future__ import annotations

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from app.grid import GridConfig, build_grid
from app.potential import HamiltonianModel, PotentialSpec

settings.register_profile("fast", max_examples=25, deadline=None)
settings.register_profile(
    "ci",
    max_examples=200,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))

np.seterr(all="warn")


@pytest.fixture(scope="session")
def quadratic_model() -> HamiltonianModel:
    return HamiltonianModel(spec=PotentialSpec(family="quadratic"), eta=0.0)


@pytest.fixture(scope="session")
def quartic_model() -> HamiltonianModel:
    return HamiltonianModel(spec=PotentialSpec(family="even-monomial", l=4), eta=0.25)


@pytest.fixture(scope="session")
def quadratic_grid(quadratic_model):
    return build_grid(quadratic_model, GridConfig(Rx=8.0, Ry=8.0, nx=65, ny=65))


@pytest.fixture(scope="session")
def quartic_grid(quartic_model):
    return build_grid(quartic_model, GridConfig(Rx=3.5, Ry=8.0, nx=41, ny=41))
