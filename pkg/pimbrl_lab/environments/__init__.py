"""Simulated environments and the registry that resolves them by id."""

from typing import Any, Dict, Tuple, Type

import numpy as np

from pimbrl_lab.environments.base import BaseEnvironment, EnvSpec, EnvState, StepResult
from pimbrl_lab.environments.burgers import BurgersEnvironment
from pimbrl_lab.environments.cartpole import CartPoleEnvironment
from pimbrl_lab.environments.ks import AttractorBankSettings, KsEnvironment
from pimbrl_lab.environments.pendulum import PendulumEnvironment

# Registry of available environments
ENVIRONMENT_REGISTRY: Dict[str, Type[BaseEnvironment]] = {
    "cartpole": CartPoleEnvironment,
    "pendulum": PendulumEnvironment,
    "burgers": BurgersEnvironment,
    "ks": KsEnvironment,
}


def make_environment(env_id: str, **kwargs: Any) -> BaseEnvironment:
    """
    Instantiate a registered environment.

    Raises:
        ValueError: If ``env_id`` is not registered
    """
    if env_id not in ENVIRONMENT_REGISTRY:
        available = ", ".join(ENVIRONMENT_REGISTRY)
        raise ValueError(f"Unknown environment '{env_id}'. Available: {available}")
    return ENVIRONMENT_REGISTRY[env_id](**kwargs)


def reset(spec: EnvSpec, seed: int) -> Tuple[EnvState, np.ndarray]:
    """Start an episode of the environment ``spec`` describes."""
    env = make_environment(spec.id, control_steps_per_episode=spec.control_steps_per_episode)
    return env.reset(seed)


def step(state: EnvState, action: Any) -> StepResult:
    """Apply one control action to the episode in ``state``."""
    return state.env.step(state, action)


__all__ = [
    "AttractorBankSettings",
    "BaseEnvironment",
    "BurgersEnvironment",
    "CartPoleEnvironment",
    "ENVIRONMENT_REGISTRY",
    "EnvSpec",
    "EnvState",
    "KsEnvironment",
    "PendulumEnvironment",
    "StepResult",
    "make_environment",
    "reset",
    "step",
]
