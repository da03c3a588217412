"""Torque-limited pendulum swing-up."""

from typing import Any

import numpy as np

from pimbrl_lab.environments.base import BaseEnvironment, EnvSpec
from pimbrl_lab.neural import tape as T

GRAVITY = 10.0
LENGTH = 1.0
MASS = 1.0
MAX_SPEED = 8.0
MAX_TORQUE = 2.0


def wrap_angle(theta: Any) -> Any:
    """Map angles to [-pi, pi)."""
    return (np.asarray(theta) + np.pi) % (2 * np.pi) - np.pi


def pendulum_derivatives(theta: Any, theta_dot: Any, torque: Any) -> Any:
    """Angular acceleration; theta = 0 is upright."""
    return -(3 * GRAVITY / (2 * LENGTH)) * T.sin(theta + np.pi) + (
        3.0 / (MASS * LENGTH**2)
    ) * torque


def pendulum_reward(theta: float, theta_dot: float, torque: float) -> float:
    theta = float(wrap_angle(theta))
    return -(theta**2) - 0.1 * theta_dot**2 - 0.001 * torque**2


class PendulumEnvironment(BaseEnvironment):
    """Swing the pendulum up and hold it; observation is ``(theta, theta_dot)``."""

    default_spec = EnvSpec(
        id="pendulum",
        obs_dim=2,
        action_dim=1,
        action_low=(-MAX_TORQUE,),
        action_high=(MAX_TORQUE,),
        control_steps_per_episode=200,
        inner_steps_per_control=1,
        inner_dt=0.05,
        integrator="euler",
    )

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)

    def rhs(self, u: Any, action: Any) -> Any:
        torque = np.asarray(action, dtype=np.float64)[..., 0]
        theta_dot = u[..., 1]
        return T.stack([theta_dot, pendulum_derivatives(u[..., 0], theta_dot, torque)], axis=-1)

    def after_inner_step(self, u: np.ndarray) -> np.ndarray:
        return np.stack(
            [wrap_angle(u[..., 0]), np.clip(u[..., 1], -MAX_SPEED, MAX_SPEED)], axis=-1
        )

    def state_difference(self, later: Any, earlier: Any) -> Any:
        diff = later - earlier
        values = T.value_of(diff)
        # wrap the angle component; the offset is a constant so gradients pass unchanged
        offset = np.zeros_like(values)
        offset[..., 0] = values[..., 0] - wrap_angle(values[..., 0])
        return diff - offset

    def reward(self, trajectory: np.ndarray, action: np.ndarray, start_time: float) -> float:
        theta, theta_dot = trajectory[-1]
        return pendulum_reward(theta, theta_dot, float(action[0]))
