"""
Experiment configuration: pydantic models, per-environment defaults, loading and echo.

A config file is a JSON document with the sections ``env``, ``agent``, ``model``
and ``loop`` plus top-level ``algo``, ``seed`` and ``output_dir``. Any field left
unset falls back to the environment's defaults below.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from pimbrl_lab.agent import Td3Settings
from pimbrl_lab.environments import AttractorBankSettings, BaseEnvironment, make_environment
from pimbrl_lab.errors import ConfigurationError

logger = logging.getLogger(__name__)

CONFIG_ECHO_FILENAME = "config.json"

EnvId = Literal["cartpole", "pendulum", "burgers", "ks"]
Algo = Literal["mfrl", "mbrl", "pimbrl"]

# Per-environment defaults; hyper-parameter tables of the method plus loop cadence
ENVIRONMENT_DEFAULTS: Dict[str, Dict[str, Dict[str, Any]]] = {
    "cartpole": {
        "env": {"episode_length": 200},
        "agent": {"gamma": 0.99, "start_steps": 400},
        "model": {
            "threshold": 1e-4,
            "rollout_length": 200,
            "min_real_samples": 800,
            "min_physics_samples": 1000,
            "intermediate_steps": 1,
        },
        "loop": {"eval_every": 500, "fine_tune_threshold": None},
    },
    "pendulum": {
        "env": {"episode_length": 200},
        "agent": {"gamma": 0.99, "start_steps": 1000},
        "model": {
            "threshold": 1e-2,
            "rollout_length": 200,
            "min_real_samples": 6000,
            "min_physics_samples": 12000,
            "intermediate_steps": 1,
        },
        "loop": {"eval_every": 500, "fine_tune_threshold": None},
    },
    "burgers": {
        "env": {"episode_length": 60},
        "agent": {"gamma": 0.99, "start_steps": 120},
        "model": {
            "threshold": 1e-2,
            "rollout_length": 1,
            "min_real_samples": 120,
            "min_physics_samples": 120,
            "intermediate_steps": 10,
        },
        "loop": {"eval_every": 500, "fine_tune_threshold": None},
    },
    "ks": {
        "env": {"episode_length": 400},
        "agent": {"gamma": 0.977, "start_steps": 2000},
        "model": {
            "threshold": 1e-2,
            "rollout_length": 3,
            "min_real_samples": 6000,
            "min_physics_samples": 12000,
            "intermediate_steps": 10,
        },
        "loop": {"eval_every": 5000, "fine_tune_threshold": -55.0},
    },
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EnvConfig(_Section):
    """Which environment to run and how it is set up."""

    id: EnvId = Field(..., description="Environment id (cartpole, pendulum, burgers, ks)")
    episode_length: Optional[int] = Field(
        None, ge=1, description="Maximum control steps per episode (environment default if unset)"
    )
    attractor_trajectories: int = Field(8, ge=0, description="KS bank: parallel trajectories")
    attractor_snapshots: int = Field(40, ge=0, description="KS bank: snapshots per trajectory")
    attractor_burn_in: float = Field(500.0, ge=0, description="KS bank: transient time discarded")
    attractor_interval: float = Field(5.0, gt=0, description="KS bank: time between snapshots")
    attractor_seed: int = Field(0, description="KS bank: seed of the initial perturbations")


class AgentConfig(_Section):
    """TD3 learner and replay settings."""

    gamma: Optional[float] = Field(None, gt=0, le=1, description="Discount factor")
    polyak: float = Field(0.995, ge=0, le=1, description="Target-network averaging factor rho")
    policy_delay: int = Field(2, ge=1, description="Actor update every P_D critic updates")
    iterations: int = Field(50, ge=1, description="Gradient iterations per update cycle (I_RL)")
    batch_size: int = Field(100, ge=1, description="Transitions per gradient step (J)")
    learning_rate: float = Field(1e-3, gt=0, description="Adam learning rate for actor and critics")
    hidden_sizes: Tuple[int, ...] = Field((256, 256), description="Hidden layer widths")
    exploration_noise: float = Field(0.1, ge=0, description="Action noise, fraction of range")
    target_noise: float = Field(0.2, ge=0, description="Target-policy smoothing noise")
    target_noise_clip: float = Field(0.5, ge=0, description="Clip of the smoothing noise")
    actor_final_scale: float = Field(0.01, ge=0, description="Scale of the actor output layer")
    update_every: int = Field(50, ge=1, description="Real steps between update cycles")
    start_steps: Optional[int] = Field(None, ge=0, description="Uniform-random warm-up steps")
    real_buffer_capacity: int = Field(1_000_000, ge=1, description="Capacity of D^r")
    fake_buffer_capacity: int = Field(1_000_000, ge=1, description="Capacity of D^f")
    real_fraction: Optional[float] = Field(
        None, ge=0, le=1, description="Fraction of agent batches drawn from D^r (uniform if unset)"
    )


class ModelConfig(_Section):
    """Transition-model architecture, training and rollout settings."""

    threshold: Optional[float] = Field(None, ge=0, description="Accuracy gate lambda on L_D")
    rollout_length: Optional[int] = Field(None, ge=0, description="Model rollout length l_M")
    min_real_samples: Optional[int] = Field(
        None, ge=0, description="Real pairs before data-loss updates start (n_sM)"
    )
    min_physics_samples: Optional[int] = Field(
        None, ge=0, description="Stored pairs before physics-loss updates start (n_sR)"
    )
    intermediate_steps: Optional[int] = Field(None, ge=1, description="Sub-steps N per interval")
    physics_loss: bool = Field(True, description="Physics-loss updates (switched off for mbrl)")
    physics_sample_source: Literal["union", "fake"] = Field(
        "fake", description="Buffers physics-loss states are sampled from (union adds real states)"
    )
    learning_rate: float = Field(1e-3, gt=0, description="Adam learning rate of the model")
    batch_size: int = Field(100, ge=1, description="Real pairs per data-loss step (n_br)")
    physics_batch_size: int = Field(100, ge=1, description="States per physics-loss step")
    rollout_batch_size: int = Field(400, ge=1, description="Seed states per rollout cycle (n_bf)")
    data_iterations: int = Field(50, ge=0, description="Data-loss steps per update cycle")
    physics_iterations: int = Field(50, ge=0, description="Physics-loss steps per update cycle")
    hidden_sizes: Tuple[int, ...] = Field((256, 256), description="dense_ode hidden widths")
    latent_size: int = Field(64, ge=1, description="Encoder latent / LSTM width")
    channels: Tuple[int, ...] = Field((16, 32), description="Conv encoder channels")
    kernel_size: int = Field(5, ge=1, description="Conv kernel size (odd)")
    decoder_hidden: Tuple[int, ...] = Field((256,), description="Decoder hidden widths")


class LoopConfig(_Section):
    """Training-loop cadence, evaluation and checkpointing."""

    total_steps: int = Field(10_000, ge=0, description="Real environment steps")
    eval_every: Optional[int] = Field(None, ge=1, description="Real steps between evaluations")
    eval_episodes: int = Field(100, ge=1, description="Episodes per evaluation")
    eval_seed: int = Field(10_000, description="Base seed of evaluation episodes")
    eval_workers: int = Field(
        1, ge=1, description="Threads running evaluation episodes (results keep episode order)"
    )
    fine_tune_threshold: Optional[float] = Field(
        None, description="Average return that latches model-free fine-tuning"
    )
    fine_tune: Optional[bool] = Field(
        None, description="Enable the fine-tuning switch (on when a threshold is set)"
    )
    checkpoint_every: Optional[int] = Field(
        None, ge=1, description="Real steps between run checkpoints (each evaluation if unset)"
    )
    resume_from: Optional[str] = Field(None, description="Run checkpoint directory to resume")
    dump_trajectories: int = Field(
        1, ge=0, description="Evaluation episodes per evaluation written as trajectory dumps"
    )
    record_wall_time: bool = Field(
        False, description="Fill wall_seconds in metrics (breaks byte-identical reruns)"
    )


class ExperimentConfig(BaseModel):
    """Fully resolved experiment description; the echo of this model reproduces a run."""

    model_config = ConfigDict(extra="forbid")

    algo: Algo = Field("pimbrl", description="Algorithm variant")
    seed: int = Field(0, description="Master seed")
    output_dir: str = Field("runs/default", description="Run output directory")
    env: EnvConfig
    agent: AgentConfig = Field(default_factory=AgentConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loop: LoopConfig = Field(default_factory=LoopConfig)

    @model_validator(mode="after")
    def _fill_environment_defaults(self) -> "ExperimentConfig":
        defaults = ENVIRONMENT_DEFAULTS[self.env.id]
        for section_name, values in defaults.items():
            section = getattr(self, section_name)
            for key, value in values.items():
                if getattr(section, key) is None:
                    setattr(section, key, value)
        if self.loop.fine_tune is None:
            self.loop.fine_tune = self.loop.fine_tune_threshold is not None
        if self.loop.fine_tune and self.loop.fine_tune_threshold is None:
            raise ValueError("loop.fine_tune requires loop.fine_tune_threshold")
        if self.algo == "mbrl":
            self.model.physics_loss = False
        if self.model.kernel_size % 2 == 0:
            raise ValueError("model.kernel_size must be odd")
        return self

    # derived objects

    def td3_settings(self) -> Td3Settings:
        a = self.agent
        return Td3Settings(
            gamma=a.gamma,
            polyak=a.polyak,
            policy_delay=a.policy_delay,
            iterations=a.iterations,
            batch_size=a.batch_size,
            actor_lr=a.learning_rate,
            critic_lr=a.learning_rate,
            hidden_sizes=tuple(a.hidden_sizes),
            exploration_noise=a.exploration_noise,
            target_noise=a.target_noise,
            target_noise_clip=a.target_noise_clip,
            actor_final_scale=a.actor_final_scale,
        )

    def bank_settings(self) -> AttractorBankSettings:
        e = self.env
        return AttractorBankSettings(
            trajectories=e.attractor_trajectories,
            snapshots_per_trajectory=e.attractor_snapshots,
            burn_in=e.attractor_burn_in,
            interval=e.attractor_interval,
            seed=e.attractor_seed,
        )

    def make_environment(self) -> BaseEnvironment:
        kwargs: Dict[str, Any] = {"control_steps_per_episode": self.env.episode_length}
        if self.env.id == "ks":
            kwargs["bank_settings"] = self.bank_settings()
        return make_environment(self.env.id, **kwargs)

    def model_overrides(self) -> Dict[str, Any]:
        m = self.model
        return {
            "n_intermediate": m.intermediate_steps,
            "hidden_sizes": tuple(m.hidden_sizes),
            "latent_size": m.latent_size,
            "channels": tuple(m.channels),
            "kernel_size": m.kernel_size,
            "decoder_hidden": tuple(m.decoder_hidden),
        }

    def config_hash(self) -> str:
        """Stable id of the resolved config (output directory excluded)."""
        payload = self.model_dump(mode="json", exclude={"output_dir"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _set_dotted(document: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = document
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigurationError("Invalid override", [f"'{dotted}' crosses a non-section key"])
    node[keys[-1]] = value


def _format_violations(error: ValidationError) -> List[str]:
    violations = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "config"
        violations.append(f"{location}: {item['msg']}")
    return violations


def validate_config(document: Mapping[str, Any]) -> ExperimentConfig:
    """
    Validate a config document.

    Raises:
        ConfigurationError: Listing every violation (unknown keys, ranges, missing env id)
    """
    try:
        return ExperimentConfig.model_validate(dict(document))
    except ValidationError as e:
        raise ConfigurationError("Invalid experiment configuration", _format_violations(e)) from e


def load_config(
    path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None
) -> ExperimentConfig:
    """
    Load a JSON config file and apply dotted-key overrides (``{"model.rollout_length": 8}``).

    Overrides win over file values; unset values take the environment defaults.
    """
    document: Dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                document = json.loads(text)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file {path} is not valid JSON", [str(e)]) from e
        if not isinstance(document, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(document, dotted, value)
    document.setdefault("env", {})
    return validate_config(document)


def echo_config(config: ExperimentConfig, out_dir: Union[str, Path]) -> Path:
    """Write the resolved config next to the run outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CONFIG_ECHO_FILENAME
    path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
    logger.info("Resolved config written to %s", path)
    return path
