"""Shared twin-study fixtures.

The heavy fixtures build synthetic datasets from a planted
structure-preserving latent source on Dev1-like parameters and are session
scoped so the acceptance tests can share them.
"""

from __future__ import annotations

import numpy as np
import pytest

from qude import dynamics, models, tomography, train

TWO_PI = 2.0 * np.pi

DEV1 = dynamics.DeviceModel(
    omega01_GHz=3.448, T1_us=214.0, T2_us=32.0, base_kind="lindblad"
)
DEV2 = dynamics.DeviceModel(omega01_GHz=4.086, T1_us=62.0, T2_us=6.0, base_kind="lindblad")

PLANT_ALPHA_KHZ = np.array([0.15, 2.18, 5.66])
PLANT_ALPHA = TWO_PI * 1e-3 * PLANT_ALPHA_KHZ  # rad/us
PLANT_GAMMA = np.array([1.0 / 1686.0, 1.0 / 1686.0, 1.0 / 688.0])  # 1/us
P_MAX_DEV1 = 3.47


def planted_source() -> models.StructurePreservingSource:
    return models.StructurePreservingSource(
        dim=2, alpha=PLANT_ALPHA.copy(), gamma_raw=np.sqrt(PLANT_GAMMA)
    )


def make_twin_dataset(
    seed: int,
    n_experiments: int = 5,
    duration_us: float = 10.0,
    sample_dt_ns: float = 4.0,
    shots: int = 0,
    train_horizon_us: float | None = None,
    dev: dynamics.DeviceModel = DEV1,
    latent=None,
    p_max: float = P_MAX_DEV1,
) -> train.Dataset:
    if latent is None:
        latent = planted_source()
    rng = np.random.default_rng([seed, 0])
    amps = [p_max * (1.0 - rng.random()) for _ in range(n_experiments)]
    pairs = []
    for i, amp in enumerate(amps):
        exp = dynamics.Experiment(
            id=f"exp-{i:03d}",
            amplitude_p_MHz=float(amp),
            duration_us=duration_us,
            sample_dt_ns=sample_dt_ns,
        )
        traj = dynamics.integrate_rk4(dev, exp, latent, 4.0)
        records = tomography.simulate_records(traj, shots, np.random.default_rng([seed, 1 + i]))
        pairs.append((exp, records))
    return train.Dataset(
        pairs,
        train_horizon_us=train_horizon_us if train_horizon_us is not None else duration_us,
        total_horizon_us=duration_us,
    )


@pytest.fixture(scope="session")
def dev1() -> dynamics.DeviceModel:
    return DEV1


@pytest.fixture(scope="session")
def twin_clean_10us() -> train.Dataset:
    """Zero-shot-noise twin over the 10 us training window."""
    return make_twin_dataset(seed=1234, duration_us=10.0, shots=0)


@pytest.fixture(scope="session")
def twin_noisy_50us() -> train.Dataset:
    """5000-shot twin over the full 50 us horizon, T_Tr = 10 us."""
    return make_twin_dataset(seed=7, duration_us=50.0, shots=5000, train_horizon_us=10.0)


@pytest.fixture(scope="session")
def smoke_dataset() -> train.Dataset:
    """Tiny single-experiment problem for gradient checks."""
    exp = dynamics.Experiment(
        id="smoke", amplitude_p_MHz=2.0, duration_us=0.5, sample_dt_ns=20.0
    )
    traj = dynamics.integrate_rk4(DEV1, exp, planted_source(), 4.0)
    records = tomography.simulate_records(traj, 0, np.random.default_rng(7))
    return train.Dataset([(exp, records)], train_horizon_us=0.5, total_horizon_us=0.5)
