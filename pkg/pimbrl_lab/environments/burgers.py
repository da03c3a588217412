"""
Viscous Burgers' equation tracking a time-varying uniform reference.

The field lives on a 150-point periodic grid of length 2*pi. Convection uses the
second-order upwind scheme and diffusion the fourth-order central scheme, with
explicit Euler steps of 0.01. The agent sees the discrepancy ``u - u_re(t)``,
where the reference phase runs from 0 to 2*pi over one episode.
"""

from typing import Any

import numpy as np

from pimbrl_lab.environments.base import BaseEnvironment, EnvSpec
from pimbrl_lab.numerics import Grid1D, StencilKind, apply_stencil

GRID = Grid1D(n_points=150, length=2 * np.pi)
VISCOSITY = 0.01
REWARD_SCALE = 10.0


def _bump(grid: Grid1D, center: float, width: float) -> np.ndarray:
    return np.exp(-((width * (grid.nodes / grid.length - center)) ** 2))


def burgers_forcing(grid: Grid1D, a: Any) -> np.ndarray:
    """Two Gaussian actuators at a quarter and three quarters of the domain."""
    bumps = np.stack([_bump(grid, 0.25, 15.0), _bump(grid, 0.75, 15.0)])
    return np.asarray(a, dtype=np.float64) @ bumps


def burgers_reference(t: Any) -> Any:
    """Spatially uniform reference value at phase ``t`` in [0, 2*pi]."""
    return 0.05 * np.sin(t) + 0.5


def burgers_initial_field(grid: Grid1D, c: float) -> np.ndarray:
    """Blend of a centered Gaussian (weight c) and a two-period sinusoid (weight 1 - c)."""
    x = grid.nodes / grid.length
    gaussian = np.exp(-((5.0 * (x - 0.5)) ** 2))
    sinusoid = 0.5 * np.sin(4 * np.pi * x) + 0.5
    return 0.2 * c * gaussian + 0.2 * (1.0 - c) * sinusoid


def burgers_rhs(u: Any, a: Any, grid: Grid1D = GRID) -> Any:
    convection = apply_stencil(u, StencilKind.UPWIND2_CONVECTION, grid)
    diffusion = apply_stencil(u, StencilKind.CENTRAL4_D2, grid)
    return -0.5 * convection + VISCOSITY * diffusion + burgers_forcing(grid, a)


def rms(values: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(values))))


def burgers_reward(observation: np.ndarray) -> float:
    """``-10 * ||u^o||`` with the norm taken as RMS over grid nodes."""
    return -REWARD_SCALE * rms(observation)


class BurgersEnvironment(BaseEnvironment):
    """Drive the field onto ``u_re(t)`` with two localized sources."""

    default_spec = EnvSpec(
        id="burgers",
        obs_dim=GRID.n_points,
        action_dim=2,
        action_low=(-0.025, -0.025),
        action_high=(0.075, 0.075),
        control_steps_per_episode=60,
        inner_steps_per_control=500,
        inner_dt=0.01,
        integrator="euler",
    )

    grid = GRID

    def reference_phase(self, time: Any) -> Any:
        """Reference phase for an elapsed time; spans [0, 2*pi] over the default episode."""
        return 2 * np.pi * np.asarray(time) / self.default_spec.episode_duration

    def reference(self, time: Any) -> Any:
        return burgers_reference(self.reference_phase(time))

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return burgers_initial_field(self.grid, rng.uniform(0.0, 1.0))

    def rhs(self, u: Any, action: Any) -> Any:
        return burgers_rhs(u, action, self.grid)

    def observe(self, u: np.ndarray, time: float) -> np.ndarray:
        return u - self.reference(time)

    def reconstruct(self, observation: Any, time: Any) -> Any:
        # time may be one value per batch row
        return observation + np.expand_dims(self.reference(time), -1)

    def model_context(self, time: Any) -> np.ndarray:
        return np.expand_dims(self.reference(time), -1)

    def reward(self, trajectory: np.ndarray, action: np.ndarray, start_time: float) -> float:
        end_time = start_time + self.spec.control_dt
        return burgers_reward(self.observe(trajectory[-1], end_time))
