"""
Plot-ready report tables: model-error histograms, cross-seed performance curves,
the data-only versus physics-informed model comparison and rollout error snapshots.

Every table is comma-delimited text with one header line; summaries go to JSON
next to them so no reported number lives only on the console.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pimbrl_lab.config import CONFIG_ECHO_FILENAME, ExperimentConfig, validate_config
from pimbrl_lab.environments import BaseEnvironment
from pimbrl_lab.errors import UsageError
from pimbrl_lab.metrics import read_metrics, write_table
from pimbrl_lab.neural.params import load_checkpoint
from pimbrl_lab.replay import ReplayBuffer, TransitionBatch, buffer_sample
from pimbrl_lab.transition_model import (
    TransitionModel,
    model_predict,
    train_on_physics_batch,
    train_on_real_batch,
)

logger = logging.getLogger(__name__)

REGION_RULE = (
    "in_sample: every state component inside the axis-aligned bounding box of the "
    "training-buffer states; out_of_sample: any component outside it"
)
HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "count"]


@dataclass
class HistogramTable:
    """Binned per-transition errors of one state region."""

    region: str
    edges: np.ndarray
    counts: np.ndarray
    errors: np.ndarray

    def summary(self) -> Dict[str, Any]:
        if len(self.errors) == 0:
            return {"count": 0}
        return {
            "count": int(len(self.errors)),
            "mean": float(np.mean(self.errors)),
            "median": float(np.median(self.errors)),
            "max": float(np.max(self.errors)),
        }

    def rows(self) -> List[Tuple[float, float, int]]:
        return [
            (float(self.edges[i]), float(self.edges[i + 1]), int(self.counts[i]))
            for i in range(len(self.counts))
        ]


@dataclass
class ModelErrorReport:
    errors: np.ndarray
    in_sample: HistogramTable
    out_of_sample: HistogramTable

    @property
    def median(self) -> float:
        return float(np.median(self.errors))

    def summary(self) -> Dict[str, Any]:
        return {
            "region_rule": REGION_RULE,
            "all": {"count": int(len(self.errors)), "median": self.median},
            "in_sample": self.in_sample.summary(),
            "out_of_sample": self.out_of_sample.summary(),
        }


def transition_errors(model: TransitionModel, held_out: TransitionBatch) -> np.ndarray:
    """Mean squared next-state error of every held-out transition."""
    prediction = model_predict(model, held_out.observations, held_out.actions, held_out.times)
    diff = model.env.state_difference(prediction.next_state, held_out.next_observations)
    return np.mean(np.square(diff), axis=-1)


def in_bounding_box(states: np.ndarray, reference_states: np.ndarray) -> np.ndarray:
    """Rows of ``states`` inside the axis-aligned box spanned by ``reference_states``."""
    low = np.min(reference_states, axis=0)
    high = np.max(reference_states, axis=0)
    return np.all((states >= low) & (states <= high), axis=-1)


def histogram_edges(errors: np.ndarray, n_bins: int = 20) -> np.ndarray:
    upper = float(np.max(errors)) if len(errors) else 0.0
    return np.linspace(0.0, upper if upper > 0.0 else 1e-12, n_bins + 1)


def emit_model_error_report(
    model: TransitionModel,
    held_out: TransitionBatch,
    training_states: np.ndarray,
    out_dir: Union[str, Path],
    n_bins: int = 20,
    edges: Optional[np.ndarray] = None,
    name: str = "model_error",
) -> ModelErrorReport:
    """
    Histogram the prediction errors of ``model`` on held-out transitions.

    Writes ``{name}_in_sample.csv``, ``{name}_out_of_sample.csv`` and ``{name}_summary.json``.

    Raises:
        ValueError: If ``held_out`` is empty
    """
    if len(held_out) == 0:
        raise ValueError("Model-error report needs at least one held-out transition")
    errors = transition_errors(model, held_out)
    edges = histogram_edges(errors, n_bins) if edges is None else np.asarray(edges)
    inside = in_bounding_box(held_out.observations, np.atleast_2d(training_states))

    def table(region: str, mask: np.ndarray) -> HistogramTable:
        clipped = np.clip(errors[mask], edges[0], edges[-1])
        counts, _ = np.histogram(clipped, bins=edges)
        return HistogramTable(region=region, edges=edges, counts=counts, errors=errors[mask])

    report = ModelErrorReport(
        errors=errors, in_sample=table("in_sample", inside), out_of_sample=table("out_of_sample", ~inside)
    )
    out_dir = Path(out_dir)
    for histogram in (report.in_sample, report.out_of_sample):
        write_table(out_dir / f"{name}_{histogram.region}.csv", HISTOGRAM_COLUMNS, histogram.rows())
    (out_dir / f"{name}_summary.json").write_text(json.dumps(report.summary(), indent=2) + "\n")
    logger.info(
        "%s: %d transitions (%d in-sample), median MSE %.4g",
        name,
        len(errors),
        int(np.sum(inside)),
        report.median,
    )
    return report


def _run_identity(metrics_path: Path) -> Tuple[Optional[str], str]:
    echo = metrics_path.parent / CONFIG_ECHO_FILENAME
    if not echo.exists():
        return None, "unknown"
    document = json.loads(echo.read_text())
    return document.get("env", {}).get("id"), document.get("algo", "unknown")


def emit_curve_data(
    metrics_paths: Sequence[Union[str, Path]], out_path: Union[str, Path]
) -> List[Tuple[str, int, float, float, float, int]]:
    """
    Aggregate evaluation columns across seeds into one curve table per algorithm.

    Runs of one algorithm are aligned on the real-step values they all share.
    ``mean`` is the cross-seed mean of ``eval_mean``; ``min``/``max`` are the
    extremes of ``eval_min``/``eval_max``.

    Raises:
        UsageError: If no metrics file is given or the runs used different environments
    """
    if not metrics_paths:
        raise UsageError("emit_curve_data needs at least one metrics file")
    groups: Dict[str, List[Dict[int, Any]]] = {}
    env_ids = set()
    for path in map(Path, metrics_paths):
        env_id, algo = _run_identity(path)
        if env_id is not None:
            env_ids.add(env_id)
        rows = {r.real_steps: r for r in read_metrics(path) if r.eval_mean is not None}
        groups.setdefault(algo, []).append(rows)
    if len(env_ids) > 1:
        raise UsageError(f"Metrics files come from different environments: {sorted(env_ids)}")

    table = []
    for algo in sorted(groups):
        runs = groups[algo]
        shared = sorted(set.intersection(*(set(run) for run in runs)))
        for steps in shared:
            rows = [run[steps] for run in runs]
            table.append(
                (
                    algo,
                    steps,
                    float(np.mean([r.eval_mean for r in rows])),
                    float(min(r.eval_min for r in rows)),
                    float(max(r.eval_max for r in rows)),
                    len(rows),
                )
            )
    write_table(out_path, ["algo", "real_steps", "mean", "min", "max", "seeds"], table)
    logger.info("Curve table with %d rows written to %s", len(table), out_path)
    return table


def collect_random_transitions(
    env: BaseEnvironment, n_steps: int, rng: np.random.Generator, capacity: Optional[int] = None
) -> ReplayBuffer:
    """Fill a buffer with ``n_steps`` uniform-random-action transitions, resetting on episode end."""
    spec = env.spec
    buffer = ReplayBuffer(capacity or max(n_steps, 1), spec.obs_dim, spec.action_dim, rng)
    env_state, observation = env.reset(int(rng.integers(0, 2**31 - 1)))
    for _ in range(n_steps):
        action = spec.clip_action(rng.uniform(spec.low, spec.high))
        start_time = env_state.time
        result = env.step(env_state, action)
        buffer.push(observation, action, result.observation, result.reward, result.done, start_time)
        observation = result.observation
        if result.episode_over:
            env_state, observation = env.reset(int(rng.integers(0, 2**31 - 1)))
    return buffer


def load_checkpoint_model(checkpoint_dir: Union[str, Path]) -> Tuple[ExperimentConfig, TransitionModel]:
    """Rebuild the transition model saved in a run checkpoint."""
    checkpoint_dir = Path(checkpoint_dir)
    document = json.loads((checkpoint_dir / "run_state.json").read_text())
    config = validate_config(document["config"])
    if not (checkpoint_dir / "model.ckpt").exists():
        raise UsageError(f"{checkpoint_dir} holds no transition model (algo={config.algo})")
    env = config.make_environment()
    model = TransitionModel.create(
        env, np.random.default_rng(config.seed), config.model.learning_rate, **config.model_overrides()
    )
    parameter_sets, _ = load_checkpoint(checkpoint_dir / "model.ckpt")
    model.params.check_compatible(parameter_sets["model"])
    model.params = parameter_sets["model"]
    model.recent_data_losses.extend(document.get("recent_data_losses", []))
    return config, model


def load_training_states(checkpoint_dir: Union[str, Path]) -> np.ndarray:
    with np.load(Path(checkpoint_dir) / "buffers.npz") as data:
        return data["real.observations"]


@dataclass
class ModelComparison:
    data_only: TransitionModel
    physics_informed: TransitionModel
    reports: Dict[str, ModelErrorReport]
    threshold: float


def compare_models(
    config: ExperimentConfig,
    n_steps: int,
    out_dir: Union[str, Path],
    updates: int = 500,
    held_out_steps: int = 200,
    n_bins: int = 20,
) -> ModelComparison:
    """
    Train a data-only and a physics-informed model on the same real buffer and compare them.

    Both models start from the same initial weights and see the same data batches
    for the same number of data-loss steps; the physics-informed model also takes
    one physics-loss step after each. Writes ``model_compare.csv`` with each
    model's rolling data loss against the accuracy gate, plus both error histograms.
    """
    env = config.make_environment()
    seed = config.seed
    real = collect_random_transitions(env, n_steps, np.random.default_rng(seed))
    held_out = collect_random_transitions(
        env, held_out_steps, np.random.default_rng(seed + 1)
    ).contents()
    training_states = real.contents().observations
    cfg = config.model
    physics_rng = np.random.default_rng(seed + 2)

    models: Dict[str, TransitionModel] = {}
    for name in ("data_only", "physics_informed"):
        model = TransitionModel.create(
            env, np.random.default_rng(seed), cfg.learning_rate, **config.model_overrides()
        )
        real.rng = np.random.default_rng(seed + 3)
        for _ in range(updates):
            train_on_real_batch(model, real, cfg.batch_size)
            if name == "physics_informed":
                states = buffer_sample([real], cfg.physics_batch_size, rng=physics_rng)
                train_on_physics_batch(model, states.observations, states.actions, states.times)
        models[name] = model

    shared = histogram_edges(
        np.concatenate([transition_errors(m, held_out) for m in models.values()]), n_bins
    )
    out_dir = Path(out_dir)
    reports = {
        name: emit_model_error_report(
            model, held_out, training_states, out_dir, edges=shared, name=f"model_error_{name}"
        )
        for name, model in models.items()
    }
    write_table(
        out_dir / "model_compare.csv",
        ["model", "rolling_L_D", "threshold", "gate_open", "median_mse"],
        [
            (name, m.rolling_data_loss, cfg.threshold, m.gate_open(cfg.threshold), reports[name].median)
            for name, m in models.items()
        ],
    )
    return ModelComparison(models["data_only"], models["physics_informed"], reports, cfg.threshold)


def rollout_snapshots(
    model: TransitionModel,
    rollout_length: int,
    n_starts: int,
    seed: int,
    out_path: Union[str, Path],
) -> np.ndarray:
    """
    Roll the model and the true environment side by side under the same random actions.

    Writes one row per rollout step with the mean and max RMS observation error
    across starts; returns the (n_starts, rollout_length) error matrix.
    """
    if rollout_length < 1 or n_starts < 1:
        raise UsageError("rollout_snapshots needs a positive length and number of starts")
    env, spec = model.env, model.env.spec
    rng = np.random.default_rng(seed)
    errors = np.full((n_starts, rollout_length), np.nan)
    for i in range(n_starts):
        env_state, true_obs = env.reset(seed + i)
        predicted = true_obs
        for k in range(rollout_length):
            action = spec.clip_action(rng.uniform(spec.low, spec.high))
            step_time = env_state.time
            result = env.step(env_state, action)
            predicted = model_predict(model, predicted, action, step_time).next_state[0]
            diff = env.state_difference(predicted, result.observation)
            errors[i, k] = float(np.sqrt(np.mean(np.square(diff))))
            if result.episode_over:
                break
    rows = []
    for k in range(rollout_length):
        column = errors[:, k][np.isfinite(errors[:, k])]
        if len(column):
            rows.append((k + 1, float(np.mean(column)), float(np.max(column)), len(column)))
    write_table(out_path, ["step", "rms_error_mean", "rms_error_max", "starts"], rows)
    return errors
