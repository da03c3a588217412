"""
Learned transition model F~: (u_t, a_t) -> u_{t+1}, with N intermediate states.

Two variants are provided. ``dense_ode`` is a residual MLP over the flat state
(N = 1), used for the ODE environments. ``encoder_lstm_decoder`` encodes the
periodic field with a circular conv stack, unrolls an LSTM N times with the
action held, and decodes every hidden state back to a field.

The model works in observation space. The physics loss reconstructs physical
states (``env.reconstruct``) before evaluating the governing-equation residual
with the same right-hand side the simulator uses.
"""

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Deque, Dict, Optional, Tuple

import numpy as np

from pimbrl_lab.environments.base import BaseEnvironment
from pimbrl_lab.errors import ShapeMismatchError, UsageError
from pimbrl_lab.neural import tape as T
from pimbrl_lab.neural.layers import ConvEncoderSpec, MlpSpec, Params, init_lstm, lstm_cell_step
from pimbrl_lab.neural.optim import adam_update
from pimbrl_lab.neural.params import ParameterSet

logger = logging.getLogger(__name__)

# Window of training batches the accuracy gate averages over
GATE_WINDOW = 50

DEFAULT_PDE_INTERMEDIATE_STEPS = 10


class ModelVariant(str, Enum):
    DENSE_ODE = "dense_ode"
    ENCODER_LSTM_DECODER = "encoder_lstm_decoder"


@dataclass(frozen=True)
class ModelArchitecture:
    """Network shape of a transition model."""

    variant: ModelVariant
    state_dim: int
    action_dim: int
    n_intermediate: int = 1
    context_dim: int = 0
    hidden_sizes: Tuple[int, ...] = (256, 256)
    latent_size: int = 64
    channels: Tuple[int, ...] = (16, 32)
    kernel_size: int = 5
    decoder_hidden: Tuple[int, ...] = (256,)
    residual: bool = True

    def __post_init__(self) -> None:
        if self.n_intermediate < 1:
            raise ValueError(f"N must be at least 1, got {self.n_intermediate}")
        if self.variant is ModelVariant.DENSE_ODE and self.n_intermediate != 1:
            raise ValueError("dense_ode maps directly to the next state (N = 1)")

    @classmethod
    def for_environment(cls, env: BaseEnvironment, **overrides: Any) -> "ModelArchitecture":
        """Default architecture: dense_ode for flat ODE states, encoder-LSTM for fields."""
        context = env.model_context(0.0)
        is_field = env.spec.id in ("burgers", "ks")
        base = cls(
            variant=ModelVariant.ENCODER_LSTM_DECODER if is_field else ModelVariant.DENSE_ODE,
            state_dim=env.spec.obs_dim,
            action_dim=env.spec.action_dim,
            n_intermediate=DEFAULT_PDE_INTERMEDIATE_STEPS if is_field else 1,
            context_dim=0 if context is None else int(np.size(context)),
        )
        return replace(base, **overrides)

    @property
    def input_extra(self) -> int:
        return self.action_dim + self.context_dim

    def dense_spec(self) -> MlpSpec:
        sizes = (self.state_dim + self.input_extra,) + tuple(self.hidden_sizes) + (self.state_dim,)
        return MlpSpec(sizes=sizes, prefix="dynamics")

    def encoder_spec(self) -> ConvEncoderSpec:
        return ConvEncoderSpec(
            n_points=self.state_dim,
            latent_size=self.latent_size,
            channels=tuple(self.channels),
            kernel_size=self.kernel_size,
        )

    def decoder_spec(self) -> MlpSpec:
        sizes = (self.latent_size,) + tuple(self.decoder_hidden) + (self.state_dim,)
        return MlpSpec(sizes=sizes, prefix="decoder")

    def init(self, rng: np.random.Generator) -> ParameterSet:
        if self.variant is ModelVariant.DENSE_ODE:
            return ParameterSet(self.dense_spec().init(rng))
        arrays = self.encoder_spec().init(rng)
        arrays.update(
            init_lstm(rng, "lstm", self.latent_size + self.input_extra, self.latent_size)
        )
        arrays.update(self.decoder_spec().init(rng))
        return ParameterSet(arrays)


@dataclass
class ModelPrediction:
    """
    Predicted states over one control interval.

    ``intermediates`` has shape (batch, N + 1, state_dim): index 0 is the input
    state and index N coincides with ``next_state``.
    """

    intermediates: Any

    @property
    def n_intermediate(self) -> int:
        return T.value_of(self.intermediates).shape[-2] - 1

    @property
    def next_state(self) -> Any:
        return self.intermediates[:, -1, :]


@dataclass
class TransitionModel:
    """Parameters of F~ bound to the environment whose physics it learns."""

    env: BaseEnvironment
    architecture: ModelArchitecture
    params: ParameterSet
    learning_rate: float = 1e-3
    recent_data_losses: Deque[float] = field(default_factory=lambda: deque(maxlen=GATE_WINDOW))
    data_updates: int = 0
    physics_updates: int = 0

    @classmethod
    def create(
        cls,
        env: BaseEnvironment,
        rng: np.random.Generator,
        learning_rate: float = 1e-3,
        **architecture_overrides: Any,
    ) -> "TransitionModel":
        architecture = ModelArchitecture.for_environment(env, **architecture_overrides)
        return cls(env, architecture, architecture.init(rng), learning_rate=learning_rate)

    @property
    def rolling_data_loss(self) -> float:
        """Mean post-step L_D over the last ``GATE_WINDOW`` batches (inf before any)."""
        if not self.recent_data_losses:
            return float("inf")
        return float(np.mean(self.recent_data_losses))

    def gate_open(self, threshold: float) -> bool:
        """Accuracy gate: rollouts are admitted only while the rolling L_D is below ``threshold``."""
        return self.rolling_data_loss < threshold


def _context(model: TransitionModel, times: np.ndarray) -> Optional[np.ndarray]:
    if model.architecture.context_dim == 0:
        return None
    return model.env.model_context(times).reshape(len(times), model.architecture.context_dim)


def _forward(
    model: TransitionModel,
    params: Params,
    observations: np.ndarray,
    actions: np.ndarray,
    times: np.ndarray,
) -> ModelPrediction:
    arch = model.architecture
    inputs = [model.env.spec.normalize_action(actions)]
    context = _context(model, times)
    if context is not None:
        inputs.append(context)
    extra = np.concatenate(inputs, axis=-1)

    if arch.variant is ModelVariant.DENSE_ODE:
        out = arch.dense_spec().forward(params, np.concatenate([observations, extra], axis=-1))
        next_state = observations + out if arch.residual else out
        return ModelPrediction(T.stack([observations, next_state], axis=1))

    latent = arch.encoder_spec().forward(params, observations)
    step_input = T.concat([latent, extra], axis=-1)
    hidden, cell = latent, np.zeros((len(observations), arch.latent_size))
    decoder = arch.decoder_spec()
    states = [observations]
    for _ in range(arch.n_intermediate):
        hidden, cell = lstm_cell_step(params, "lstm", step_input, hidden, cell)
        out = decoder.forward(params, hidden)
        states.append(observations + out if arch.residual else out)
    return ModelPrediction(T.stack(states, axis=1))


def _as_batch(
    model: TransitionModel, observations: Any, actions: Any, times: Any
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    arch = model.architecture
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    if observations.shape[-1] != arch.state_dim or actions.shape[-1] != arch.action_dim:
        raise ShapeMismatchError(
            f"Model expects state {arch.state_dim} and action {arch.action_dim}, "
            f"got {observations.shape} and {actions.shape}"
        )
    if len(observations) != len(actions):
        raise ShapeMismatchError("State and action batches differ in length")
    if times is None:
        times = np.zeros(len(observations))
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (len(observations),))
    return observations, actions, times


def model_predict(
    model: TransitionModel, u_t: Any, a_t: Any, times: Any = None
) -> ModelPrediction:
    """
    Predict the intermediate and next observations for a batch of (state, physical action).

    Pure function of the parameters: no tape is recorded.

    Raises:
        ShapeMismatchError: If state or action widths do not match the architecture
    """
    observations, actions, times = _as_batch(model, u_t, a_t, times)
    prediction = _forward(model, model.params.arrays, observations, actions, times)
    return ModelPrediction(T.value_of(prediction.intermediates))


def data_loss(
    predicted: Any,
    observed: Any,
    difference: Optional[Callable[[Any, Any], Any]] = None,
) -> Any:
    """
    Batch mean of ``||predicted - observed||``.

    Returns a float for arrays and a scalar tensor when ``predicted`` is on a tape.
    """
    if len(T.value_of(predicted)) == 0:
        raise ValueError("data_loss needs at least one (prediction, truth) pair")
    diff = difference(predicted, observed) if difference else predicted - observed
    if isinstance(diff, T.Tensor):
        return T.mean(T.l2_norm(diff, axis=-1))
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


def physics_loss(
    prediction: ModelPrediction,
    a_t: Any,
    env: BaseEnvironment,
    times: Any = None,
) -> Any:
    """
    Forward-Euler residual of the governing equations on the predicted states.

    Mean over the N sub-steps and the batch of
    ``||(u_{i+1} - u_i) / dtau - F(u_i, a)||`` with ``dtau = T / N``, evaluated on
    reconstructed physical states with the action held over the interval.

    Raises:
        UsageError: If the prediction carries no sub-steps (N = 0)
    """
    n_steps = prediction.n_intermediate
    if n_steps < 1:
        raise UsageError("physics_loss needs at least one intermediate step")
    states = prediction.intermediates
    batch = T.value_of(states).shape[0]
    actions = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
    start = np.zeros(batch) if times is None else np.broadcast_to(times, (batch,))
    dtau = env.spec.control_dt / n_steps

    residual_norms = []
    earlier = env.reconstruct(states[:, 0, :], start)
    for i in range(n_steps):
        later = env.reconstruct(states[:, i + 1, :], start + (i + 1) * dtau)
        residual = env.state_difference(later, earlier) * (1.0 / dtau) - env.rhs(earlier, actions)
        residual_norms.append(T.l2_norm(residual, axis=-1))
        earlier = later
    loss = T.mean(T.stack(residual_norms, axis=0))
    return loss if isinstance(loss, T.Tensor) else float(loss)


def _apply_gradient(model: TransitionModel, loss_fn: Callable[[Dict[str, T.Tensor]], T.Tensor]):
    with T.Tape() as tape:
        watched = tape.watch(model.params.arrays)
        loss = loss_fn(watched)
    if not isinstance(loss, T.Tensor) or not tape.records:
        return float(T.value_of(loss))
    gradients = T.backward(tape, loss, watched)
    adam_update(model.params, gradients, lr=model.learning_rate)
    return float(loss.value)


def train_on_real_batch(
    model: TransitionModel, real_buffer: Any, batch_size: int, min_samples: int = 1
) -> Optional[float]:
    """
    One Adam step on L_D over a uniform batch from the real buffer.

    Returns:
        Post-step L_D on the same batch, or None (skip) while the buffer holds
        fewer than ``min_samples`` transitions
    """
    if len(real_buffer) < max(min_samples, 1):
        return None
    batch = real_buffer.sample(batch_size)
    observations, actions, times = _as_batch(model, batch.observations, batch.actions, batch.times)

    def loss_fn(params: Dict[str, T.Tensor]) -> T.Tensor:
        prediction = _forward(model, params, observations, actions, times)
        return data_loss(prediction.next_state, batch.next_observations, model.env.state_difference)

    _apply_gradient(model, loss_fn)
    after = model_predict(model, observations, actions, times)
    loss = data_loss(after.next_state, batch.next_observations, model.env.state_difference)
    model.recent_data_losses.append(loss)
    model.data_updates += 1
    logger.debug("Model L_D step %d: %.6g", model.data_updates, loss)
    return loss


def train_on_physics_batch(
    model: TransitionModel, observations: Any, actions: Any, times: Any = None
) -> float:
    """
    One Adam step on L_E over sampled state-action pairs.

    Only states, actions and their times are consumed; next-state labels are
    never part of the input.

    Returns:
        The L_E value the step was taken on
    """
    observations, actions, times = _as_batch(model, observations, actions, times)

    def loss_fn(params: Dict[str, T.Tensor]) -> T.Tensor:
        prediction = _forward(model, params, observations, actions, times)
        return physics_loss(prediction, actions, model.env, times)

    loss = _apply_gradient(model, loss_fn)
    model.physics_updates += 1
    logger.debug("Model L_E step %d: %.6g", model.physics_updates, loss)
    return loss


def predicted_rewards(
    model: TransitionModel, prediction: ModelPrediction, actions: np.ndarray, times: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Rewards, failure flags and projected next observations from predicted states.

    Rewards come from the environment's known reward function evaluated on the
    reconstructed sub-step trajectory, not from a learned head.
    """
    env = model.env
    states = T.value_of(prediction.intermediates)
    n_steps = prediction.n_intermediate
    dtau = env.spec.control_dt / n_steps
    rewards = np.zeros(len(states))
    dones = np.zeros(len(states), dtype=bool)
    next_observations = np.zeros((len(states), states.shape[-1]))
    for row in range(len(states)):
        step_times = times[row] + dtau * np.arange(n_steps + 1)
        trajectory = np.stack(
            [env.reconstruct(states[row, i], step_times[i]) for i in range(n_steps + 1)]
        )
        trajectory[-1] = env.after_inner_step(trajectory[-1])
        rewards[row] = env.reward(trajectory, actions[row], times[row])
        dones[row] = env.is_failure(trajectory[-1])
        next_observations[row] = env.observe(trajectory[-1], step_times[-1])
    return rewards, dones, next_observations


def generate_rollouts(
    model: TransitionModel,
    policy: Callable[[np.ndarray], np.ndarray],
    seed_observations: np.ndarray,
    seed_times: np.ndarray,
    rollout_length: int,
    fake_buffer: Any,
    threshold: float,
) -> Optional[int]:
    """
    Roll the model forward from seed states and store the synthetic transitions.

    A rollout ends early on a predicted failure or once its next step would start
    at or past the episode horizon, so stored times stay inside one episode.

    Args:
        model: Transition model; must pass the accuracy gate
        policy: Maps a batch of observations to physical actions (exploration included)
        seed_observations: Starting observations, shape (batch, state_dim)
        seed_times: Episode time of each seed state
        rollout_length: Control steps per rollout (l_M)
        fake_buffer: Destination buffer for synthetic transitions
        threshold: Accuracy gate lambda

    Returns:
        Number of transitions added, or None when the gate is closed
    """
    if not model.gate_open(threshold):
        logger.debug(
            "Gate closed (rolling L_D %.4g >= %.4g); skipping rollouts",
            model.rolling_data_loss,
            threshold,
        )
        return None

    observations = np.atleast_2d(np.asarray(seed_observations, dtype=np.float64))
    times = np.broadcast_to(np.asarray(seed_times, dtype=np.float64), (len(observations),)).copy()
    added = 0
    for _ in range(rollout_length):
        if len(observations) == 0:
            break
        actions = np.atleast_2d(policy(observations))
        prediction = model_predict(model, observations, actions, times)
        rewards, dones, next_observations = predicted_rewards(model, prediction, actions, times)

        finite = np.all(np.isfinite(next_observations), axis=-1)
        if not np.all(finite):
            logger.warning("Dropping %d non-finite model rollouts", int(np.sum(~finite)))
        for row in np.flatnonzero(finite):
            fake_buffer.push(
                observations[row],
                actions[row],
                next_observations[row],
                rewards[row],
                bool(dones[row]),
                times[row],
            )
        added += int(np.sum(finite))

        # rows whose next step would start at or past the episode horizon are retired
        spec = model.env.spec
        times = times + spec.control_dt
        within_episode = times < spec.episode_duration - 1e-9 * spec.control_dt
        keep = finite & ~dones & within_episode
        observations = next_observations[keep]
        times = times[keep]
    return added
