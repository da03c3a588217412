"""
Training loops for PiMBRL, the model-free TD3 baseline and the data-only MBRL ablation.

All three variants share one flat step loop so their curves share the real-step
axis. Every ``update_every`` real steps an update cycle runs: data-loss model
updates, gated model rollouts into the fake buffer, physics-loss model updates,
then a TD3 cycle on the union of the buffers. The variants differ only in which
of the model stages are enabled.
"""

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np

from pimbrl_lab.agent import Td3Agent
from pimbrl_lab.config import ExperimentConfig, echo_config, validate_config
from pimbrl_lab.environments import BaseEnvironment
from pimbrl_lab.environments.base import EnvState
from pimbrl_lab.environments.trajectory import TrajectoryRecorder
from pimbrl_lab.errors import NumericBlowupError, UsageError
from pimbrl_lab.metrics import (
    METRICS_FILENAME,
    MODEL_LOSSES_FILENAME,
    CsvStream,
    MetricsRow,
    ModelLossRow,
    read_metrics,
    record_metrics,
    truncate_after,
    write_table,
)
from pimbrl_lab.neural.params import load_checkpoint, save_checkpoint
from pimbrl_lab.replay import ReplayBuffer, TransitionBatch, buffer_sample, load_buffers, save_buffers
from pimbrl_lab.transition_model import (
    TransitionModel,
    generate_rollouts,
    train_on_physics_batch,
    train_on_real_batch,
)

logger = logging.getLogger(__name__)

CHECKPOINT_DIRNAME = "checkpoint"
TRAJECTORY_DIRNAME = "trajectories"
EVAL_FILENAME = "eval.csv"
DIAGNOSTICS_FILENAME = "diagnostics.json"

RNG_STREAMS = ("env", "agent", "sampling", "model", "eval")


@dataclass
class EvaluationStats:
    """Returns of one evaluation, in episode order."""

    returns: List[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def min(self) -> float:
        return float(np.min(self.returns))

    @property
    def max(self) -> float:
        return float(np.max(self.returns))


@dataclass
class RunState:
    """Counters, switches and random streams of one run."""

    rngs: Dict[str, np.random.Generator]
    real_steps: int = 0
    episode: int = 0
    gate_open: bool = False
    fine_tune: bool = False
    last_data_loss: Optional[float] = None
    last_physics_loss: Optional[float] = None

    @classmethod
    def from_seed(cls, seed: int) -> "RunState":
        children = np.random.SeedSequence(seed).spawn(len(RNG_STREAMS))
        return cls(rngs={name: np.random.default_rng(s) for name, s in zip(RNG_STREAMS, children)})

    def to_json(self) -> Dict[str, Any]:
        return {
            "real_steps": self.real_steps,
            "episode": self.episode,
            "gate_open": self.gate_open,
            "fine_tune": self.fine_tune,
            "last_data_loss": self.last_data_loss,
            "last_physics_loss": self.last_physics_loss,
            "rngs": {name: rng.bit_generator.state for name, rng in self.rngs.items()},
        }

    def restore(self, document: Dict[str, Any]) -> None:
        """Load counters and generator states in place (generators are shared by reference)."""
        for key in ("real_steps", "episode", "gate_open", "fine_tune"):
            setattr(self, key, document[key])
        self.last_data_loss = document["last_data_loss"]
        self.last_physics_loss = document["last_physics_loss"]
        for name, state in document["rngs"].items():
            self.rngs[name].bit_generator.state = state


@dataclass
class RunArtifacts:
    """Where a finished run left its outputs."""

    output_dir: Path
    metrics_path: Path
    checkpoint_dir: Path
    rows: List[MetricsRow] = field(default_factory=list)
    final_evaluation: Optional[EvaluationStats] = None
    state: Optional[RunState] = None


def fine_tune_gate(state: RunState, avg_return: float, threshold: float) -> bool:
    """Latch model-free fine-tuning once the average return exceeds ``threshold``."""
    if not state.fine_tune and avg_return > threshold:
        logger.info(
            "Average return %.4g above %.4g at step %d; switching to model-free fine-tuning",
            avg_return,
            threshold,
            state.real_steps,
        )
        state.fine_tune = True
    return state.fine_tune


def _run_episode(
    agent: Td3Agent, env: BaseEnvironment, seed: int, recorder: Optional[TrajectoryRecorder]
) -> float:
    env_state, observation = env.reset(seed)
    total = 0.0
    while True:
        action = agent.select_action(observation, explore=False)
        start_time, start_u = env_state.time, env_state.u
        result = env.step(env_state, action)
        total += result.reward
        if recorder is not None:
            recorder.record(start_time, start_u, result.info["action"], result.reward, result.done)
        observation = result.observation
        if result.episode_over:
            break
    if recorder is not None:
        recorder.close(env_state.time, env_state.u)
    return total


def evaluate_policy(
    agent: Td3Agent,
    env: BaseEnvironment,
    n_episodes: int,
    seed: int,
    dump_dir: Optional[Path] = None,
    dump_episodes: int = 0,
    workers: int = 1,
) -> EvaluationStats:
    """
    Run exploration-free episodes and collect their returns.

    Episode ``i`` starts from ``env.reset(seed + i)``. The agent is only read.
    With ``workers > 1`` episodes run on a thread pool; results are still
    reported in episode order.

    Args:
        agent: Policy to evaluate
        env: Environment; each episode owns a fresh episode state
        n_episodes: Number of test episodes (at least one)
        seed: Base seed of the test episodes
        dump_dir: Directory for trajectory dumps
        dump_episodes: How many of the first episodes to dump
        workers: Threads running episodes
    """
    if n_episodes < 1:
        raise UsageError("evaluate_policy needs at least one episode")
    spec = env.spec
    recorders = {
        i: TrajectoryRecorder(spec.obs_dim, spec.action_dim)
        for i in range(min(dump_episodes, n_episodes) if dump_dir is not None else 0)
    }

    def run(i: int) -> float:
        return _run_episode(agent, env, seed + i, recorders.get(i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            returns = list(pool.map(run, range(n_episodes)))
    else:
        returns = [run(i) for i in range(n_episodes)]

    for i, recorder in recorders.items():
        recorder.write(Path(dump_dir) / f"episode_{i:03d}.csv")
    return EvaluationStats(returns=returns)


class Experiment:
    """One training run: environment, agent, buffers, optional model and their bookkeeping."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.checkpoint_dir = self.output_dir / CHECKPOINT_DIRNAME
        self.env = config.make_environment()
        self.spec = self.env.spec
        self.state = RunState.from_seed(config.seed)
        rngs = self.state.rngs

        self.agent = Td3Agent(self.spec, config.td3_settings(), rngs["agent"])
        agent_cfg = config.agent
        self.real_buffer = ReplayBuffer(
            agent_cfg.real_buffer_capacity, self.spec.obs_dim, self.spec.action_dim, rngs["model"]
        )
        self.fake_buffer = ReplayBuffer(
            agent_cfg.fake_buffer_capacity,
            self.spec.obs_dim,
            self.spec.action_dim,
            rngs["model"],
            fake=True,
        )
        self.model: Optional[TransitionModel] = None
        if config.algo != "mfrl":
            self.model = TransitionModel.create(
                self.env, rngs["model"], config.model.learning_rate, **config.model_overrides()
            )

        self.env_state: Optional[EnvState] = None
        self.observation: Optional[np.ndarray] = None
        self._started = 0.0

    # helpers

    @property
    def model_active(self) -> bool:
        return self.model is not None and not self.state.fine_tune

    def _agent_buffers(self) -> List[ReplayBuffer]:
        if self.model_active or len(self.fake_buffer) == 0:
            return [self.real_buffer, self.fake_buffer]
        return [self.real_buffer]

    def _sample_agent_batch(self, batch_size: int) -> TransitionBatch:
        return buffer_sample(
            self._agent_buffers(),
            batch_size,
            rng=self.state.rngs["sampling"],
            real_fraction=self.config.agent.real_fraction,
        )

    def _new_episode(self) -> None:
        seed = int(self.state.rngs["env"].integers(0, 2**31 - 1))
        self.env_state, self.observation = self.env.reset(seed)

    # update cycle

    def _model_cycle(self) -> None:
        model, cfg, rng = self.model, self.config.model, self.state.rngs["model"]
        for _ in range(cfg.data_iterations):
            loss = train_on_real_batch(model, self.real_buffer, cfg.batch_size, cfg.min_real_samples)
            if loss is None:
                break
            self.state.last_data_loss = loss
        self.state.gate_open = model.gate_open(cfg.threshold)

        if self.state.gate_open and cfg.rollout_length > 0:
            seeds = buffer_sample(
                [self.real_buffer, self.fake_buffer], cfg.rollout_batch_size, rng=rng
            )
            added = generate_rollouts(
                model,
                lambda obs: self.agent.select_action(obs, explore=True, rng=rng),
                seeds.observations,
                seeds.times,
                cfg.rollout_length,
                self.fake_buffer,
                cfg.threshold,
            )
            logger.debug("Added %s model transitions (fake buffer %d)", added, len(self.fake_buffer))

        if not cfg.physics_loss or len(self.fake_buffer) == 0:
            return
        # n_sR counts pairs in both buffers; the residual is taken on model-generated states
        stored = len(self.real_buffer) + len(self.fake_buffer)
        if stored < cfg.min_physics_samples:
            return
        source = (
            [self.real_buffer, self.fake_buffer]
            if cfg.physics_sample_source == "union"
            else [self.fake_buffer]
        )
        for _ in range(cfg.physics_iterations):
            batch = buffer_sample(source, cfg.physics_batch_size, rng=rng)
            self.state.last_physics_loss = train_on_physics_batch(
                model, batch.observations, batch.actions, batch.times
            )

    def update_cycle(self) -> None:
        if self.model_active:
            self._model_cycle()
            self.losses_stream.append(
                ModelLossRow(
                    real_steps=self.state.real_steps,
                    data_updates=self.model.data_updates,
                    physics_updates=self.model.physics_updates,
                    model_L_D=self.state.last_data_loss,
                    model_L_E=self.state.last_physics_loss,
                    gate_open=self.state.gate_open,
                )
            )
        if (
            self.state.real_steps >= self.config.agent.start_steps
            and len(self.real_buffer) >= self.config.agent.batch_size
        ):
            self.agent.train_cycle(self._sample_agent_batch)

    # evaluation

    def evaluate_and_record(self) -> MetricsRow:
        loop, state = self.config.loop, self.state
        dump_dir = self.output_dir / TRAJECTORY_DIRNAME / f"step_{state.real_steps:08d}"
        stats = evaluate_policy(
            self.agent,
            self.env,
            loop.eval_episodes,
            loop.eval_seed,
            dump_dir=dump_dir,
            dump_episodes=loop.dump_trajectories,
            workers=loop.eval_workers,
        )
        if loop.fine_tune:
            fine_tune_gate(state, stats.mean, loop.fine_tune_threshold)
        row = MetricsRow(
            real_steps=state.real_steps,
            episode=state.episode,
            eval_mean=stats.mean,
            eval_min=stats.min,
            eval_max=stats.max,
            model_L_D=state.last_data_loss,
            model_L_E=state.last_physics_loss,
            gate_open=state.gate_open,
            fine_tune=state.fine_tune,
            wall_seconds=time.perf_counter() - self._started if loop.record_wall_time else None,
        )
        record_metrics(self.metrics_stream, row)
        logger.info(
            "[%d/%d] episode=%d, eval_mean=%.4g, L_D=%s, gate=%s%s",
            state.real_steps,
            loop.total_steps,
            state.episode,
            stats.mean,
            "-" if state.last_data_loss is None else f"{state.last_data_loss:.4g}",
            "open" if state.gate_open else "closed",
            ", fine-tuning" if state.fine_tune else "",
        )
        self.last_evaluation = stats
        return row

    # checkpoints

    def save_checkpoint(self, directory: Optional[Path] = None) -> Path:
        directory = Path(directory or self.checkpoint_dir)
        directory.mkdir(parents=True, exist_ok=True)
        self.agent.save(directory / "agent.ckpt")
        document: Dict[str, Any] = {
            "config": self.config.model_dump(mode="json"),
            "run": self.state.to_json(),
        }
        if self.model is not None:
            save_checkpoint(
                directory / "model.ckpt",
                {"model": self.model.params},
                {
                    "data_updates": self.model.data_updates,
                    "physics_updates": self.model.physics_updates,
                },
            )
            document["recent_data_losses"] = list(self.model.recent_data_losses)
        save_buffers(directory / "buffers.npz", {"real": self.real_buffer, "fake": self.fake_buffer})
        if self.env_state is not None:
            document["episode"] = {
                "u": self.env_state.u.tolist(),
                "elapsed": self.env_state.elapsed,
                "done": self.env_state.done,
                "rng": self.env_state.rng.bit_generator.state,
            }
        (directory / "run_state.json").write_text(json.dumps(document, indent=2) + "\n")
        logger.debug("Checkpoint written to %s at step %d", directory, self.state.real_steps)
        return directory

    def restore_checkpoint(self, directory: Union[str, Path]) -> None:
        """Resume from a checkpoint written by ``save_checkpoint``."""
        directory = Path(directory)
        document = json.loads((directory / "run_state.json").read_text())
        self.agent.load(directory / "agent.ckpt")
        self.state.restore(document["run"])
        if self.model is not None:
            parameter_sets, counters = load_checkpoint(directory / "model.ckpt")
            self.model.params.check_compatible(parameter_sets["model"])
            self.model.params = parameter_sets["model"]
            self.model.data_updates = counters.get("data_updates", 0)
            self.model.physics_updates = counters.get("physics_updates", 0)
            self.model.recent_data_losses.clear()
            self.model.recent_data_losses.extend(document.get("recent_data_losses", []))
        load_buffers(directory / "buffers.npz", {"real": self.real_buffer, "fake": self.fake_buffer})
        episode = document.get("episode")
        if episode is not None:
            rng = np.random.default_rng()
            rng.bit_generator.state = episode["rng"]
            self.env_state = EnvState(
                env=self.env,
                u=np.asarray(episode["u"], dtype=np.float64),
                rng=rng,
                elapsed=episode["elapsed"],
                done=episode["done"],
            )
            self.observation = self.env_state.observation
        logger.info("Resumed from %s at step %d", directory, self.state.real_steps)

    # main loop

    def _write_diagnostics(self, error: NumericBlowupError) -> None:
        diagnostics = {
            "error": type(error).__name__,
            "message": str(error),
            "step_index": error.step_index,
            "real_steps": self.state.real_steps,
            "episode": self.state.episode,
            "last_data_loss": self.state.last_data_loss,
            "last_physics_loss": self.state.last_physics_loss,
        }
        path = self.output_dir / DIAGNOSTICS_FILENAME
        path.write_text(json.dumps(diagnostics, indent=2) + "\n")
        logger.error("Run aborted at step %d: %s (details in %s)", self.state.real_steps, error, path)

    def run(self) -> RunArtifacts:
        config, loop, state = self.config, self.config.loop, self.state
        echo_config(config, self.output_dir)
        metrics_path = self.output_dir / METRICS_FILENAME
        losses_path = self.output_dir / MODEL_LOSSES_FILENAME

        if loop.resume_from:
            self.restore_checkpoint(loop.resume_from)
            truncate_after(metrics_path, state.real_steps)
            truncate_after(losses_path, state.real_steps, ModelLossRow)
        self.metrics_stream = CsvStream(metrics_path)
        self.metrics_stream.ensure_header()
        self.losses_stream = CsvStream(losses_path, ModelLossRow)
        self.last_evaluation: Optional[EvaluationStats] = None
        self._started = time.perf_counter()
        checkpoint_every = loop.checkpoint_every or loop.eval_every

        logger.info(
            "Starting %s on %s: seed=%d, steps=%d, output=%s",
            config.algo,
            config.env.id,
            config.seed,
            loop.total_steps,
            self.output_dir,
        )
        try:
            if self.env_state is None or self.env_state.done:
                self._new_episode()
            while state.real_steps < loop.total_steps:
                self._env_step()
                if state.real_steps % config.agent.update_every == 0:
                    self.update_cycle()
                if state.real_steps % loop.eval_every == 0:
                    self.evaluate_and_record()
                if state.real_steps % checkpoint_every == 0:
                    self.save_checkpoint()
            last = self.metrics_stream.last_real_steps
            if state.real_steps > 0 and last != state.real_steps:
                self.evaluate_and_record()
            self.save_checkpoint()
        except NumericBlowupError as e:
            self._write_diagnostics(e)
            raise

        return RunArtifacts(
            output_dir=self.output_dir,
            metrics_path=metrics_path,
            checkpoint_dir=self.checkpoint_dir,
            rows=read_metrics(metrics_path),
            final_evaluation=self.last_evaluation,
            state=state,
        )

    def _env_step(self) -> None:
        state = self.state
        if state.real_steps < self.config.agent.start_steps:
            action = self.agent.random_action()
        else:
            action = self.agent.select_action(self.observation, explore=True)
        start_time = self.env_state.time
        result = self.env.step(self.env_state, action)
        self.real_buffer.push(
            self.observation,
            result.info["action"],
            result.observation,
            result.reward,
            result.done,
            start_time,
        )
        state.real_steps += 1
        self.observation = result.observation
        if result.episode_over:
            state.episode += 1
            self._new_episode()


def _with_algo(config: ExperimentConfig, algo: str) -> ExperimentConfig:
    if config.algo == algo:
        return config
    document = config.model_dump(mode="json")
    document["algo"] = algo
    return validate_config(document)


def run_experiment(config: ExperimentConfig) -> RunArtifacts:
    """Run the variant ``config.algo`` names."""
    return Experiment(config).run()


def run_pimbrl(config: ExperimentConfig) -> RunArtifacts:
    """Dyna-style TD3 with a model trained on data and physics losses."""
    return run_experiment(_with_algo(config, "pimbrl"))


def run_mbrl(config: ExperimentConfig) -> RunArtifacts:
    """Dyna-style TD3 with a data-only model (physics-loss updates off)."""
    return run_experiment(_with_algo(config, "mbrl"))


def run_mfrl(config: ExperimentConfig) -> RunArtifacts:
    """Plain TD3 on real transitions only."""
    return run_experiment(_with_algo(config, "mfrl"))


# Registry of training loops by algorithm name
ALGORITHM_REGISTRY: Dict[str, Callable[[ExperimentConfig], RunArtifacts]] = {
    "pimbrl": run_pimbrl,
    "mbrl": run_mbrl,
    "mfrl": run_mfrl,
}


def evaluate_checkpoint(
    checkpoint_dir: Union[str, Path], n_episodes: int, seed: Optional[int] = None
) -> EvaluationStats:
    """
    Evaluate the agent stored in a run checkpoint and write ``eval.csv`` next to it.

    The environment and network shapes come from the config saved with the checkpoint.
    """
    checkpoint_dir = Path(checkpoint_dir)
    state_path = checkpoint_dir / "run_state.json"
    if not state_path.exists():
        raise UsageError(f"No run checkpoint at {checkpoint_dir}")
    document = json.loads(state_path.read_text())
    config = validate_config(document["config"])
    env = config.make_environment()
    agent = Td3Agent(env.spec, config.td3_settings(), np.random.default_rng(config.seed))
    agent.load(checkpoint_dir / "agent.ckpt")
    base_seed = config.loop.eval_seed if seed is None else seed
    stats = evaluate_policy(agent, env, n_episodes, base_seed)
    write_table(
        checkpoint_dir / EVAL_FILENAME,
        ["episode", "seed", "return"],
        [[i, base_seed + i, r] for i, r in enumerate(stats.returns)],
    )
    logger.info(
        "Evaluated %s over %d episodes: mean=%.4g min=%.4g max=%.4g",
        checkpoint_dir,
        n_episodes,
        stats.mean,
        stats.min,
        stats.max,
    )
    return stats
