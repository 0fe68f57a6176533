"""Shared fixtures: built-in profiles, models, schedules and masks."""

import numpy as np
import pytest

from editlab.models.schemas import RegionMask, ScheduleSpec
from editlab.services.mixture import Component, MixtureModel
from editlab.services.sampler import NoiseSchedule
from editlab.utils.config_loader import load_profile


@pytest.fixture(scope="session")
def canonical_config():
    return load_profile("canonical")


@pytest.fixture(scope="session")
def canonical_model(canonical_config):
    return MixtureModel.from_spec(canonical_config.model)


@pytest.fixture(scope="session")
def canonical_mask(canonical_config):
    return canonical_config.mask


@pytest.fixture(scope="session")
def single_model():
    """Mildly anisotropic single Gaussian (the single_gaussian profile)."""
    return MixtureModel.from_spec(load_profile("single_gaussian").model)


@pytest.fixture(scope="session")
def diagonal_model():
    return MixtureModel.from_spec(load_profile("diagonal_gaussian").model)


@pytest.fixture(scope="session")
def correlated_model():
    return MixtureModel.from_spec(load_profile("correlated_gaussian").model)


@pytest.fixture(scope="session")
def three_component_model():
    """Three overlapping components in 3-d, for nonlinear score checks."""
    components = [
        Component(weight=0.3, mean=np.array([-1.0, 0.0, 0.5]), cov=np.diag([0.6, 0.9, 0.4])),
        Component(
            weight=0.45,
            mean=np.array([1.0, 0.5, -0.5]),
            cov=np.array([[0.8, 0.2, 0.0], [0.2, 0.5, 0.1], [0.0, 0.1, 0.7]]),
        ),
        Component(weight=0.25, mean=np.array([0.0, -1.0, 0.0]), cov=np.eye(3) * 0.5),
    ]
    return MixtureModel(components, {"left": [0], "right": [1], "low": [2], "upper": [0, 1]})


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.from_spec(ScheduleSpec())


@pytest.fixture(scope="session")
def short_schedule():
    """T = 10 on the same training grid; keeps multi-run tests fast."""
    return NoiseSchedule.from_spec(ScheduleSpec(T=10))


@pytest.fixture
def half_mask_4():
    return RegionMask(bits=[True, True, False, False])
