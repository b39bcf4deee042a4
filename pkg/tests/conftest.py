import numpy as np
import pytest

from magcal.models import CalibrationParams, NoiseModel
from magcal.simulate import (
    SimConfig,
    SimScenario,
    generate_measurements,
    generate_trajectory,
    sample_true_params,
)


def zero_noise(params, keep_bias=True):
    """Copy of params with all noise covariances zeroed (bias kept by default)."""
    z = np.zeros((3, 3))
    bias = params.noise.gyro_bias if keep_bias else np.zeros(3)
    return CalibrationParams(params.mag, params.field, NoiseModel(bias, z, z, z))


def make_noisy_case(seed=123, sim_config=None):
    """(scenario, dataset) drawn from the study ranges at a fixed seed."""
    if sim_config is None:
        sim_config = SimConfig()
    rng = np.random.default_rng(seed)
    params = sample_true_params(rng, sim_config.dip_deg)
    time, quats, rates = generate_trajectory(sim_config)
    scenario = SimScenario(params, time, quats, rates, seed)
    return scenario, generate_measurements(scenario, rng)


def make_noise_free_case(seed=123, sim_config=None):
    """Same as make_noisy_case but with exact (noise-free) measurements."""
    if sim_config is None:
        sim_config = SimConfig()
    rng = np.random.default_rng(seed)
    params = zero_noise(sample_true_params(rng, sim_config.dip_deg))
    time, quats, rates = generate_trajectory(sim_config)
    scenario = SimScenario(params, time, quats, rates, seed)
    return scenario, generate_measurements(scenario, rng)


@pytest.fixture(scope="session")
def noisy_case():
    return make_noisy_case()


@pytest.fixture(scope="session")
def noise_free_case():
    return make_noise_free_case()
