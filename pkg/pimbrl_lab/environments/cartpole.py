"""Cart-pole balancing with a bang-bang force on the cart."""

from typing import Any, Tuple

import numpy as np

from pimbrl_lab.environments.base import BaseEnvironment, EnvSpec
from pimbrl_lab.neural import tape as T

CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
GRAVITY = 9.8
FORCE_MAGNITUDE = 10.0

THETA_LIMIT = np.pi / 12
X_LIMIT = 2.4
INITIAL_STATE_BOUND = 0.05


def cartpole_derivatives(state: Any, force: Any) -> Tuple[Any, Any]:
    """
    Accelerations ``(x_acc, theta_acc)`` of the cart-pole system.

    State order is ``(x, x_dot, theta, theta_dot)`` along the last axis.
    """
    theta_dot = state[..., 3]
    sin_theta = T.sin(state[..., 2])
    cos_theta = T.cos(state[..., 2])
    total_mass = POLE_MASS + CART_MASS
    pole_mass_length = POLE_MASS * POLE_HALF_LENGTH

    temp = (force + pole_mass_length * theta_dot * theta_dot * sin_theta) / total_mass
    theta_acc = (GRAVITY * sin_theta - cos_theta * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_theta * cos_theta / total_mass)
    )
    x_acc = temp - pole_mass_length * theta_acc * cos_theta / total_mass
    return x_acc, theta_acc


class CartPoleEnvironment(BaseEnvironment):
    """Keep the pole within 12 degrees of upright and the cart within 2.4 units of the center."""

    default_spec = EnvSpec(
        id="cartpole",
        obs_dim=4,
        action_dim=1,
        action_low=(-FORCE_MAGNITUDE,),
        action_high=(FORCE_MAGNITUDE,),
        control_steps_per_episode=200,
        inner_steps_per_control=1,
        inner_dt=0.02,
        integrator="euler",
        discrete_actions=(-FORCE_MAGNITUDE, FORCE_MAGNITUDE),
    )

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-INITIAL_STATE_BOUND, INITIAL_STATE_BOUND, size=4)

    def rhs(self, u: Any, action: Any) -> Any:
        force = np.asarray(action, dtype=np.float64)[..., 0]
        x_acc, theta_acc = cartpole_derivatives(u, force)
        return T.stack([u[..., 1], x_acc, u[..., 3], theta_acc], axis=-1)

    def reward(self, trajectory: np.ndarray, action: np.ndarray, start_time: float) -> float:
        return 1.0

    def is_failure(self, u: np.ndarray) -> bool:
        return bool(abs(u[0]) > X_LIMIT or abs(u[2]) > THETA_LIMIT)
