"""
TD3 actor-critic agent.

The actor and both critics work in normalized action space [-1, 1]; the
environment spec converts to and from physical actions at the boundary.
Replay buffers store physical actions.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from pimbrl_lab.environments.base import EnvSpec
from pimbrl_lab.neural import tape as T
from pimbrl_lab.neural.layers import MlpSpec
from pimbrl_lab.neural.optim import adam_update
from pimbrl_lab.neural.params import ParameterSet, load_checkpoint, save_checkpoint
from pimbrl_lab.replay import TransitionBatch

logger = logging.getLogger(__name__)

NETWORK_NAMES = ("actor", "critic1", "critic2", "actor_target", "critic1_target", "critic2_target")


@dataclass(frozen=True)
class Td3Settings:
    """Hyper-parameters of the TD3 learner."""

    gamma: float = 0.99
    polyak: float = 0.995
    policy_delay: int = 2
    iterations: int = 50
    batch_size: int = 100
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    hidden_sizes: Tuple[int, ...] = (256, 256)
    exploration_noise: float = 0.1
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    actor_final_scale: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.polyak <= 1.0:
            raise ValueError(f"polyak must be in [0, 1], got {self.polyak}")


def polyak_update(target: ParameterSet, live: ParameterSet, rho: float) -> ParameterSet:
    """
    ``target <- rho * target + (1 - rho) * live``, elementwise and in place.

    Raises:
        ShapeMismatchError: If the two sets differ in names or shapes
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    target.check_compatible(live)
    for name, value in target.arrays.items():
        value *= rho
        value += (1.0 - rho) * live.arrays[name]
    return target


class Td3Agent:
    """Deterministic actor, twin critics and their Polyak-averaged targets."""

    def __init__(self, spec: EnvSpec, settings: Td3Settings, rng: np.random.Generator):
        self.spec = spec
        self.settings = settings
        self.rng = rng
        self.update_count = 0

        hidden = tuple(settings.hidden_sizes)
        self.actor_spec = MlpSpec(
            sizes=(spec.obs_dim,) + hidden + (spec.action_dim,),
            prefix="actor",
            output_activation="tanh",
        )
        self.critic_spec = MlpSpec(
            sizes=(spec.obs_dim + spec.action_dim,) + hidden + (1,), prefix="critic"
        )
        self.actor = ParameterSet(self.actor_spec.init(rng, final_scale=settings.actor_final_scale))
        self.critic1 = ParameterSet(self.critic_spec.init(rng))
        self.critic2 = ParameterSet(self.critic_spec.init(rng))
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()

    # network evaluation

    def policy(self, params, observations):
        """Normalized actions in [-1, 1] for a batch (or a single) observation."""
        return self.actor_spec.forward(params, observations)

    def q_value(self, params, observations, normalized_actions):
        inputs = T.concat([observations, normalized_actions], axis=-1)
        return self.critic_spec.forward(params, inputs)[..., 0]

    # acting

    def select_action(
        self,
        observation: np.ndarray,
        explore: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """
        Physical action(s) for one observation or a batch.

        With ``explore`` set, Gaussian noise of ``exploration_noise * (high - low)`` is
        added before clamping (and, for discrete specs, before sign mapping). Noise is
        drawn from ``rng`` when given, else from the agent stream.
        """
        normalized = T.value_of(self.policy(self.actor.arrays, np.asarray(observation)))
        action = self.spec.denormalize_action(normalized)
        if explore:
            sigma = self.settings.exploration_noise * (self.spec.high - self.spec.low)
            noise_rng = self.rng if rng is None else rng
            action = action + sigma * noise_rng.standard_normal(action.shape)
        return self.spec.clip_action(action)

    def random_action(self) -> np.ndarray:
        """Uniform draw from the action box, used for warm-up steps."""
        return self.spec.clip_action(self.rng.uniform(self.spec.low, self.spec.high))

    # learning

    def compute_td3_target(self, batch: TransitionBatch) -> np.ndarray:
        """``r + gamma * (1 - d) * min_i q_targ_i(s', clip(pi_targ(s') + eps))``."""
        s = self.settings
        next_actions = T.value_of(self.policy(self.actor_target.arrays, batch.next_observations))
        noise = np.clip(
            s.target_noise * self.rng.standard_normal(next_actions.shape),
            -s.target_noise_clip,
            s.target_noise_clip,
        )
        next_actions = np.clip(next_actions + noise, -1.0, 1.0)
        q1 = self.q_value(self.critic1_target.arrays, batch.next_observations, next_actions)
        q2 = self.q_value(self.critic2_target.arrays, batch.next_observations, next_actions)
        return batch.rewards + s.gamma * (1.0 - batch.dones) * np.minimum(q1, q2)

    def _critic_step(self, critic: ParameterSet, batch: TransitionBatch, target: np.ndarray):
        actions = self.spec.normalize_action(batch.actions)
        with T.Tape() as tape:
            watched = tape.watch(critic.arrays)
            error = self.q_value(watched, batch.observations, actions) - target
            loss = T.mean(error * error)
        adam_update(critic, T.backward(tape, loss, watched), lr=self.settings.critic_lr)
        return float(loss.value)

    def update_critics(self, batch: TransitionBatch) -> Tuple[float, float]:
        """One Adam step per critic on the TD mean squared error; returns both losses."""
        target = self.compute_td3_target(batch)
        return (
            self._critic_step(self.critic1, batch, target),
            self._critic_step(self.critic2, batch, target),
        )

    def update_actor_delayed(self, batch: TransitionBatch, iteration: int) -> Optional[float]:
        """
        Deterministic policy-gradient step plus target updates on every
        ``policy_delay``-th iteration; a no-op otherwise.
        """
        if iteration % self.settings.policy_delay != 0:
            return None
        with T.Tape() as tape:
            watched = tape.watch(self.actor.arrays)
            actions = self.policy(watched, batch.observations)
            loss = -T.mean(self.q_value(self.critic1.arrays, batch.observations, actions))
        adam_update(self.actor, T.backward(tape, loss, watched), lr=self.settings.actor_lr)

        rho = self.settings.polyak
        polyak_update(self.actor_target, self.actor, rho)
        polyak_update(self.critic1_target, self.critic1, rho)
        polyak_update(self.critic2_target, self.critic2, rho)
        return float(loss.value)

    def train_cycle(
        self, sample: Callable[[int], TransitionBatch], iterations: Optional[int] = None
    ) -> Dict[str, float]:
        """Run ``iterations`` (default I_RL) critic updates with delayed actor updates."""
        critic_losses, actor_losses = [], []
        total = self.settings.iterations if iterations is None else iterations
        for k in range(1, total + 1):
            batch = sample(self.settings.batch_size)
            self.update_count += 1
            critic_losses.append(np.mean(self.update_critics(batch)))
            actor_loss = self.update_actor_delayed(batch, k)
            if actor_loss is not None:
                actor_losses.append(actor_loss)
        summary = {
            "critic_loss": float(np.mean(critic_losses)) if critic_losses else float("nan"),
            "actor_loss": float(np.mean(actor_losses)) if actor_losses else float("nan"),
        }
        logger.debug("TD3 cycle (update %d): %s", self.update_count, summary)
        return summary

    # checkpoints

    def networks(self) -> Dict[str, ParameterSet]:
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.networks(), {"update_count": self.update_count})

    def load(self, path: Union[str, Path]) -> None:
        """Restore every network, its optimizer moments and the update counter."""
        parameter_sets, counters = load_checkpoint(path)
        for name in NETWORK_NAMES:
            current = getattr(self, name)
            current.check_compatible(parameter_sets[name])
            setattr(self, name, parameter_sets[name])
        self.update_count = counters.get("update_count", 0)
