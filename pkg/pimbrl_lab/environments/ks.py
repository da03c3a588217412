"""
Forced Kuramoto-Sivashinsky equation on a 64-point periodic grid of length 8*pi.

Second and fourth derivatives use sixth-order central stencils, convection the
second-order upwind scheme, and time stepping is RK4 with dt = 0.001. Episodes
start from snapshots of the unforced attractor, generated once per bank
setting and cached in memory (and on disk when PIMBRL_CACHE_DIR is set).
"""

import hashlib
import json
import logging
import os
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from pimbrl_lab.environments.base import BaseEnvironment, EnvSpec
from pimbrl_lab.errors import ConfigurationError
from pimbrl_lab.numerics import Grid1D, StencilKind, apply_stencil, rk4_step

logger = logging.getLogger(__name__)

GRID = Grid1D(n_points=64, length=8 * np.pi)
ACTUATOR_FRACTIONS = (0.0, 0.25, 0.5, 0.75)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def ks_forcing(grid: Grid1D, a: Any) -> np.ndarray:
    """Four unit-variance Gaussian actuators, wrapped around the periodic seam."""
    x = grid.nodes
    bumps = []
    for fraction in ACTUATOR_FRACTIONS:
        center = fraction * grid.length
        bump = sum(
            np.exp(-((x - center + image * grid.length) ** 2) / 2.0) for image in (-1, 0, 1)
        )
        bumps.append(bump / np.sqrt(2 * np.pi))
    return np.asarray(a, dtype=np.float64) @ np.stack(bumps)


def ks_rhs(u: Any, a: Any, grid: Grid1D = GRID) -> Any:
    second = apply_stencil(u, StencilKind.CENTRAL6_D2, grid)
    fourth = apply_stencil(u, StencilKind.CENTRAL6_D4, grid)
    convection = apply_stencil(u, StencilKind.UPWIND2_CONVECTION, grid)
    return -second - fourth - 0.5 * convection + ks_forcing(grid, a)


def ks_reward(
    u_history: np.ndarray, f_history: np.ndarray, snapshot_dt: float, grid: Grid1D = GRID
) -> float:
    """
    Negative mean dissipation plus input power over one control step.

    Args:
        u_history: Snapshots over the step, shape (k + 1, n_points), evenly spaced
        f_history: Forcing field(s) over the step, broadcastable against ``u_history``
        snapshot_dt: Time between consecutive snapshots
    """
    u_x = apply_stencil(u_history, StencilKind.CENTRAL6_D1, grid)
    u_xx = apply_stencil(u_history, StencilKind.CENTRAL6_D2, grid)
    # node mean == (1/l) * integral over x for the periodic node sum
    density = np.mean(u_xx**2 + u_x**2 + u_history * f_history, axis=-1)
    duration = snapshot_dt * (len(u_history) - 1)
    return float(-_trapezoid(density, dx=snapshot_dt) / duration)


@dataclass(frozen=True)
class AttractorBankSettings:
    """How the bank of unforced-attractor snapshots is generated."""

    trajectories: int = 8
    snapshots_per_trajectory: int = 40
    burn_in: float = 500.0
    interval: float = 5.0
    perturbation: float = 0.01
    seed: int = 0
    dt: float = 0.001

    def cache_key(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_bank_cache: Dict[AttractorBankSettings, np.ndarray] = {}
_bank_lock = threading.Lock()


def _integrate_unforced(u: np.ndarray, duration: float, dt: float) -> np.ndarray:
    zero_action = np.zeros(len(ACTUATOR_FRACTIONS))
    for i in range(int(round(duration / dt))):
        u = rk4_step(lambda v: ks_rhs(v, zero_action), u, dt, i)
    return u


def generate_attractor_bank(settings: AttractorBankSettings, grid: Grid1D = GRID) -> np.ndarray:
    """Integrate a batch of perturbed zero states past transients and harvest snapshots."""
    rng = np.random.default_rng(settings.seed)
    u = settings.perturbation * rng.standard_normal((settings.trajectories, grid.n_points))
    if settings.trajectories == 0 or settings.snapshots_per_trajectory == 0:
        return np.zeros((0, grid.n_points))

    logger.info(
        "Generating KS attractor bank (%d trajectories x %d snapshots, burn-in %.0f)",
        settings.trajectories,
        settings.snapshots_per_trajectory,
        settings.burn_in,
    )
    u = _integrate_unforced(u, settings.burn_in, settings.dt)
    snapshots = []
    for _ in range(settings.snapshots_per_trajectory):
        u = _integrate_unforced(u, settings.interval, settings.dt)
        snapshots.append(u.copy())
    return np.concatenate(snapshots, axis=0)


def _cache_path(settings: AttractorBankSettings) -> Optional[Path]:
    cache_dir = os.getenv("PIMBRL_CACHE_DIR")
    if not cache_dir:
        return None
    return Path(cache_dir) / f"ks_attractor_{settings.cache_key()}.npy"


def attractor_bank(settings: AttractorBankSettings) -> np.ndarray:
    """Cached bank for ``settings``; generated on first use."""
    with _bank_lock:
        if settings in _bank_cache:
            return _bank_cache[settings]

        path = _cache_path(settings)
        if path is not None and path.exists():
            logger.info("Loading KS attractor bank from %s", path)
            bank = np.load(path)
        else:
            bank = generate_attractor_bank(settings)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                np.save(path, bank)

        _bank_cache[settings] = bank
        return bank


class KsEnvironment(BaseEnvironment):
    """Suppress spatiotemporal chaos at minimal actuation power."""

    default_spec = EnvSpec(
        id="ks",
        obs_dim=GRID.n_points,
        action_dim=4,
        action_low=(-0.5,) * 4,
        action_high=(0.5,) * 4,
        control_steps_per_episode=400,
        inner_steps_per_control=250,
        inner_dt=0.001,
        integrator="rk4",
    )

    grid = GRID

    def __init__(
        self,
        control_steps_per_episode: Optional[int] = None,
        bank_settings: Optional[AttractorBankSettings] = None,
    ):
        super().__init__(control_steps_per_episode)
        self.bank_settings = bank_settings or AttractorBankSettings()

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        bank = attractor_bank(self.bank_settings)
        if len(bank) == 0:
            raise ConfigurationError(
                "KS attractor bank is empty",
                [f"bank settings {asdict(self.bank_settings)} produce no snapshots"],
            )
        return bank[rng.integers(len(bank))].copy()

    def rhs(self, u: Any, action: Any) -> Any:
        return ks_rhs(u, action, self.grid)

    def reward(self, trajectory: np.ndarray, action: np.ndarray, start_time: float) -> float:
        snapshot_dt = self.spec.control_dt / (len(trajectory) - 1)
        return ks_reward(trajectory, ks_forcing(self.grid, action), snapshot_dt, self.grid)
