"""Base class and shared types for all simulated environments."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from pimbrl_lab.errors import EnvironmentDivergedError, NumericBlowupError, UsageError
from pimbrl_lab.numerics import INTEGRATORS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    """Static description of an environment: dimensions, actuation and time stepping."""

    id: str
    obs_dim: int
    action_dim: int
    action_low: Tuple[float, ...]
    action_high: Tuple[float, ...]
    control_steps_per_episode: int
    inner_steps_per_control: int
    inner_dt: float
    integrator: str = "euler"
    discrete_actions: Optional[Tuple[float, ...]] = None

    @property
    def control_dt(self) -> float:
        """Duration T of one control step."""
        return self.inner_steps_per_control * self.inner_dt

    @property
    def episode_duration(self) -> float:
        return self.control_steps_per_episode * self.control_dt

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    def clip_action(self, action: Any) -> np.ndarray:
        """Clamp into the box; discrete specs snap to the allowed value by sign."""
        action = np.asarray(action, dtype=np.float64)
        if action.ndim == 0 or action.shape[-1] != self.action_dim:
            action = action.reshape(self.action_dim)
        action = np.clip(action, self.low, self.high)
        if self.discrete_actions is not None:
            negative, positive = min(self.discrete_actions), max(self.discrete_actions)
            action = np.where(action >= 0.0, positive, negative)
        return action

    def normalize_action(self, action: Any) -> np.ndarray:
        """Map a physical action from the box to [-1, 1]."""
        center = 0.5 * (self.high + self.low)
        half_range = 0.5 * (self.high - self.low)
        return (np.asarray(action, dtype=np.float64) - center) / half_range

    def denormalize_action(self, normalized: Any) -> np.ndarray:
        """Inverse of ``normalize_action``."""
        center = 0.5 * (self.high + self.low)
        half_range = 0.5 * (self.high - self.low)
        return center + half_range * np.asarray(normalized, dtype=np.float64)


@dataclass
class EnvState:
    """Mutable state of one episode. Single owner; not shared between threads."""

    env: "BaseEnvironment"
    u: np.ndarray
    rng: np.random.Generator
    elapsed: int = 0
    done: bool = False

    @property
    def spec(self) -> EnvSpec:
        return self.env.spec

    @property
    def time(self) -> float:
        return self.elapsed * self.spec.control_dt

    @property
    def observation(self) -> np.ndarray:
        return self.env.observe(self.u, self.time)


@dataclass
class StepResult:
    """
    Outcome of one control step.

    ``done`` is set only on genuine failure; reaching the episode cap sets
    ``truncated`` instead so value bootstrapping is not masked at the horizon.
    """

    observation: np.ndarray
    reward: float
    done: bool
    truncated: bool = False
    info: Dict[str, Any] = field(default_factory=dict)

    @property
    def episode_over(self) -> bool:
        return self.done or self.truncated


class BaseEnvironment(ABC):
    """
    Abstract base class for all environments.

    Subclasses define the governing equations (``rhs``), the initial-state
    distribution, the reward and the failure rule. The step loop, zero-order
    hold of the action and the divergence checks live here.
    """

    default_spec: EnvSpec

    def __init__(self, control_steps_per_episode: Optional[int] = None):
        """
        Initialize the environment.

        Args:
            control_steps_per_episode: Episode cap override (uses the default spec if not provided)
        """
        spec = self.default_spec
        if control_steps_per_episode is not None:
            spec = replace(spec, control_steps_per_episode=control_steps_per_episode)
        self.spec = spec

    @abstractmethod
    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        """Draw the physical state an episode starts from."""

    @abstractmethod
    def rhs(self, u: Any, action: Any) -> Any:
        """
        Time derivative of the physical state under a constant action.

        Must accept a numpy array or a tape tensor with any leading batch axes,
        with ``action`` broadcastable against them.
        """

    @abstractmethod
    def reward(self, trajectory: np.ndarray, action: np.ndarray, start_time: float) -> float:
        """
        Reward of one control step.

        Args:
            trajectory: Physical states from the start to the end of the step,
                evenly spaced in time, shape (k + 1, state_dim)
            action: Physical action held over the step
            start_time: Time at the start of the step
        """

    def is_failure(self, u: np.ndarray) -> bool:
        """Genuine failure termination (d = 1). Most environments never fail."""
        return False

    def after_inner_step(self, u: np.ndarray) -> np.ndarray:
        """Projection applied after every numerical step (clamps, angle wrapping)."""
        return u

    def observe(self, u: np.ndarray, time: float) -> np.ndarray:
        """Observation of a physical state at ``time``."""
        return np.array(u, dtype=np.float64, copy=True)

    def reconstruct(self, observation: Any, time: Any) -> Any:
        """Physical state behind an observation; inverse of ``observe``."""
        return observation

    def model_context(self, time: Any) -> Optional[np.ndarray]:
        """Extra model input that restores Markovianity of the observation, if any."""
        return None

    def state_difference(self, later: Any, earlier: Any) -> Any:
        """``later - earlier``, respecting periodic state components."""
        return later - earlier

    # episode API

    def reset(self, seed: int) -> Tuple[EnvState, np.ndarray]:
        """Start an episode; deterministic given ``seed``."""
        rng = np.random.default_rng(seed)
        state = EnvState(env=self, u=self.initial_state(rng), rng=rng)
        return state, state.observation

    def integrate(
        self, u: np.ndarray, action: np.ndarray, step_index: int = 0
    ) -> List[np.ndarray]:
        """Advance one control step with the action held; returns every inner state."""
        integrator = INTEGRATORS[self.spec.integrator]
        trajectory = [u]
        for _ in range(self.spec.inner_steps_per_control):
            try:
                u = integrator(lambda v: self.rhs(v, action), u, self.spec.inner_dt, step_index)
            except NumericBlowupError:
                raise EnvironmentDivergedError(self.spec.id, step_index) from None
            if not np.all(np.isfinite(u)):
                raise EnvironmentDivergedError(self.spec.id, step_index)
            u = self.after_inner_step(u)
            trajectory.append(u)
        return trajectory

    def step(self, state: EnvState, action: Any) -> StepResult:
        """
        Apply one control action.

        Raises:
            UsageError: If the episode is already over
            EnvironmentDivergedError: If the simulation produced non-finite values
        """
        if state.done:
            raise UsageError(f"Episode of '{self.spec.id}' is over; call reset first")

        action = self.spec.clip_action(action)
        start_time = state.time
        trajectory = self.integrate(state.u, action, state.elapsed)
        state.u = trajectory[-1]
        state.elapsed += 1

        reward = float(self.reward(np.stack(trajectory), action, start_time))
        failed = self.is_failure(state.u)
        truncated = not failed and state.elapsed >= self.spec.control_steps_per_episode
        state.done = failed or truncated
        return StepResult(
            observation=state.observation,
            reward=reward,
            done=failed,
            truncated=truncated,
            info={"elapsed": state.elapsed, "time": state.time, "action": action},
        )
