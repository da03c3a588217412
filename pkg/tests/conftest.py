"""Shared fixtures: small environments and configs that keep the suite fast."""

import numpy as np
import pytest

from pimbrl_lab.config import load_config
from pimbrl_lab.environments import AttractorBankSettings, KsEnvironment, make_environment

# A few hundred RK4 steps instead of the full burn-in
TINY_BANK = AttractorBankSettings(
    trajectories=2, snapshots_per_trajectory=3, burn_in=0.05, interval=0.01, seed=0
)


@pytest.fixture(autouse=True)
def no_bank_disk_cache(monkeypatch):
    monkeypatch.delenv("PIMBRL_CACHE_DIR", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cartpole():
    return make_environment("cartpole")


@pytest.fixture
def pendulum():
    return make_environment("pendulum")


@pytest.fixture
def burgers():
    return make_environment("burgers")


@pytest.fixture
def ks():
    return KsEnvironment(control_steps_per_episode=4, bank_settings=TINY_BANK)


@pytest.fixture
def small_run_config(tmp_path):
    """Cart-pole run sized for seconds, not minutes."""

    def build(algo="pimbrl", seed=0, **overrides):
        values = {
            "env.id": "cartpole",
            "algo": algo,
            "seed": seed,
            "output_dir": str(tmp_path / f"{algo}_{seed}"),
            "loop.total_steps": 120,
            "loop.eval_every": 60,
            "loop.eval_episodes": 2,
            "agent.start_steps": 40,
            "agent.update_every": 20,
            "agent.iterations": 4,
            "agent.batch_size": 16,
            "agent.hidden_sizes": [16, 16],
            "model.min_real_samples": 20,
            "model.min_physics_samples": 20,
            "model.data_iterations": 3,
            "model.physics_iterations": 2,
            "model.batch_size": 16,
            "model.physics_batch_size": 16,
            "model.rollout_batch_size": 8,
            "model.rollout_length": 2,
            "model.hidden_sizes": [16, 16],
        }
        values.update(overrides)
        return load_config(overrides=values)

    return build
