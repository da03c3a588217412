"""Tests for the training loop, evaluation, checkpoints and the algorithm variants."""

import json

import numpy as np
import pytest

from pimbrl_lab.agent import Td3Agent, Td3Settings
from pimbrl_lab.environments import make_environment
from pimbrl_lab.errors import EnvironmentDivergedError, UsageError
from pimbrl_lab.metrics import ModelLossRow, read_metrics, read_rows
from pimbrl_lab.orchestrator import (
    ALGORITHM_REGISTRY,
    Experiment,
    RunState,
    evaluate_checkpoint,
    evaluate_policy,
    fine_tune_gate,
    run_experiment,
    run_mfrl,
)


@pytest.fixture
def pendulum_agent(pendulum):
    return Td3Agent(pendulum.spec, Td3Settings(hidden_sizes=(8,)), np.random.default_rng(0))


class TestFineTuneGate:
    """One-way switch to model-free fine-tuning."""

    def test_latches_above_threshold(self):
        state = RunState.from_seed(0)
        assert fine_tune_gate(state, -56.0, -55.0) is False
        assert fine_tune_gate(state, -54.0, -55.0) is True
        assert fine_tune_gate(state, -80.0, -55.0) is True

    def test_equal_return_does_not_latch(self):
        assert fine_tune_gate(RunState.from_seed(0), -55.0, -55.0) is False


class TestEvaluatePolicy:
    """Exploration-free test episodes."""

    def test_single_episode(self, pendulum_agent, pendulum):
        stats = evaluate_policy(pendulum_agent, pendulum, 1, seed=0)
        assert len(stats.returns) == 1
        assert stats.mean == stats.min == stats.max

    def test_repeatable(self, pendulum_agent, pendulum):
        first = evaluate_policy(pendulum_agent, pendulum, 3, seed=5)
        second = evaluate_policy(pendulum_agent, pendulum, 3, seed=5)
        assert first.returns == second.returns

    def test_threads_keep_episode_order(self, pendulum_agent, pendulum):
        serial = evaluate_policy(pendulum_agent, pendulum, 4, seed=5)
        threaded = evaluate_policy(pendulum_agent, pendulum, 4, seed=5, workers=3)
        assert serial.returns == threaded.returns

    def test_needs_an_episode(self, pendulum_agent, pendulum):
        with pytest.raises(UsageError):
            evaluate_policy(pendulum_agent, pendulum, 0, seed=0)

    def test_trajectory_dump(self, tmp_path, pendulum_agent):
        env = make_environment("pendulum", control_steps_per_episode=5)
        evaluate_policy(pendulum_agent, env, 3, seed=0, dump_dir=tmp_path, dump_episodes=2)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["episode_000.csv", "episode_001.csv"]
        assert len((tmp_path / "episode_000.csv").read_text().splitlines()) == 1 + 5 + 1


class TestRunState:
    """Seeded random streams and their persistence."""

    def test_streams_are_independent_and_seeded(self):
        first, second = RunState.from_seed(3), RunState.from_seed(3)
        assert first.rngs["agent"].random() == second.rngs["agent"].random()
        assert first.rngs["env"].random() != first.rngs["model"].random()

    def test_restore_in_place(self):
        state = RunState.from_seed(1)
        generator = state.rngs["sampling"]
        saved = json.loads(json.dumps(state.to_json()))
        expected = generator.random(3)
        state.real_steps = 99
        state.restore(saved)
        assert state.rngs["sampling"] is generator
        assert state.real_steps == 0
        assert np.array_equal(generator.random(3), expected)


class TestExperimentRun:
    """Small end-to-end runs on the cart-pole."""

    def test_outputs(self, small_run_config):
        config = small_run_config()
        artifacts = run_experiment(config)
        out = artifacts.output_dir

        assert [row.real_steps for row in artifacts.rows] == [60, 120]
        assert all(row.eval_mean >= 1.0 for row in artifacts.rows)
        assert json.loads((out / "config.json").read_text())["algo"] == "pimbrl"
        for name in ("agent.ckpt", "model.ckpt", "buffers.npz", "run_state.json"):
            assert (artifacts.checkpoint_dir / name).exists()
        assert (out / "trajectories" / "step_00000060" / "episode_000.csv").exists()
        losses = read_rows(out / "model_losses.csv", ModelLossRow)
        assert [row.real_steps for row in losses] == [20, 40, 60, 80, 100, 120]

    def test_final_evaluation_off_cadence(self, small_run_config):
        artifacts = run_experiment(small_run_config(**{"loop.total_steps": 90}))
        assert [row.real_steps for row in artifacts.rows] == [60, 90]

    def test_zero_steps(self, small_run_config):
        artifacts = run_experiment(small_run_config(**{"loop.total_steps": 0}))
        assert artifacts.rows == []
        lines = artifacts.metrics_path.read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("real_steps,")

    def test_byte_identical_reruns(self, small_run_config, tmp_path):
        first = run_experiment(small_run_config(output_dir=str(tmp_path / "a")))
        second = run_experiment(small_run_config(output_dir=str(tmp_path / "b")))
        assert first.metrics_path.read_bytes() == second.metrics_path.read_bytes()

    def test_threaded_evaluation_matches_serial(self, small_run_config, tmp_path):
        serial = run_experiment(small_run_config(output_dir=str(tmp_path / "serial")))
        threaded = run_experiment(
            small_run_config(output_dir=str(tmp_path / "threaded"), **{"loop.eval_workers": 2})
        )
        assert threaded.metrics_path.read_bytes() == serial.metrics_path.read_bytes()

    def test_resume_matches_uninterrupted_run(self, small_run_config, tmp_path):
        straight = run_experiment(small_run_config(output_dir=str(tmp_path / "straight")))

        split_dir = tmp_path / "split"
        run_experiment(small_run_config(output_dir=str(split_dir), **{"loop.total_steps": 60}))
        resumed = run_experiment(
            small_run_config(
                output_dir=str(split_dir),
                **{"loop.resume_from": str(split_dir / "checkpoint")},
            )
        )
        assert resumed.metrics_path.read_bytes() == straight.metrics_path.read_bytes()

    def test_gate_open_fills_fake_buffer(self, small_run_config):
        experiment = Experiment(small_run_config(**{"model.threshold": 1e9}))
        artifacts = experiment.run()
        assert len(experiment.fake_buffer) > 0
        assert experiment.model.physics_updates > 0
        assert artifacts.rows[-1].gate_open
        assert artifacts.rows[-1].model_L_E is not None

    def test_closed_gate_adds_no_rollouts(self, small_run_config):
        experiment = Experiment(small_run_config(**{"model.threshold": 0.0}))
        artifacts = experiment.run()
        assert len(experiment.fake_buffer) == 0
        assert not any(row.gate_open for row in artifacts.rows)

    @pytest.mark.parametrize("source", ["fake", "union"])
    def test_closed_gate_skips_physics_updates(self, small_run_config, source):
        """The residual is only taken once the model has produced fake transitions."""
        experiment = Experiment(
            small_run_config(
                **{"model.threshold": 0.0, "model.physics_sample_source": source}
            )
        )
        artifacts = experiment.run()
        assert experiment.model.data_updates > 0
        assert experiment.model.physics_updates == 0
        assert all(row.model_L_E is None for row in artifacts.rows)

    def test_physics_updates_use_fake_states_only(self, small_run_config, monkeypatch):
        import pimbrl_lab.orchestrator as orchestrator

        seen = []
        original = orchestrator.buffer_sample

        def tracking_sample(buffers, batch_size, **kwargs):
            batch = original(buffers, batch_size, **kwargs)
            seen.append((tuple(id(b) for b in buffers), batch_size))
            return batch

        monkeypatch.setattr(orchestrator, "buffer_sample", tracking_sample)
        config = small_run_config(**{"model.threshold": 1e9, "model.physics_batch_size": 13})
        experiment = Experiment(config)
        experiment.run()
        physics_draws = [buffers for buffers, size in seen if size == 13]
        assert physics_draws
        assert all(buffers == (id(experiment.fake_buffer),) for buffers in physics_draws)

    def test_mbrl_skips_physics_updates(self, small_run_config):
        experiment = Experiment(small_run_config(algo="mbrl", **{"model.threshold": 1e9}))
        experiment.run()
        assert experiment.model.data_updates > 0
        assert experiment.model.physics_updates == 0

    def test_mfrl_has_no_model(self, small_run_config):
        experiment = Experiment(small_run_config(algo="mfrl"))
        artifacts = experiment.run()
        assert experiment.model is None
        assert not (artifacts.checkpoint_dir / "model.ckpt").exists()
        assert all(row.model_L_D is None for row in artifacts.rows)

    def test_inert_model_leaves_agent_identical_to_mfrl(self, small_run_config, tmp_path):
        """With the gate shut the model never feeds the agent, so TD3 sees the same batches."""
        mfrl = Experiment(small_run_config(algo="mfrl", output_dir=str(tmp_path / "mfrl")))
        mfrl.run()
        pimbrl = Experiment(
            small_run_config(output_dir=str(tmp_path / "pimbrl"), **{"model.threshold": 0.0})
        )
        pimbrl.run()
        for name, params in mfrl.agent.networks().items():
            assert params.distance(pimbrl.agent.networks()[name]) == 0.0
        mfrl_rows = read_metrics(mfrl.output_dir / "metrics.csv")
        pimbrl_rows = read_metrics(pimbrl.output_dir / "metrics.csv")
        assert [r.eval_mean for r in mfrl_rows] == [r.eval_mean for r in pimbrl_rows]

    def test_fine_tune_stops_model_work(self, small_run_config):
        experiment = Experiment(
            small_run_config(**{"loop.fine_tune_threshold": -1e9, "model.threshold": 1e9})
        )
        artifacts = experiment.run()
        assert [row.fine_tune for row in artifacts.rows] == [True, True]
        losses = read_rows(experiment.output_dir / "model_losses.csv", ModelLossRow)
        assert losses[-1].real_steps == 60

    def test_blowup_writes_diagnostics(self, small_run_config, monkeypatch):
        experiment = Experiment(small_run_config())

        def diverge():
            raise EnvironmentDivergedError("cartpole", 3)

        monkeypatch.setattr(experiment, "_env_step", diverge)
        with pytest.raises(EnvironmentDivergedError):
            experiment.run()
        diagnostics = json.loads((experiment.output_dir / "diagnostics.json").read_text())
        assert diagnostics["error"] == "EnvironmentDivergedError"
        assert diagnostics["step_index"] == 3


class TestVariants:
    """Registry entry points and checkpoint evaluation."""

    def test_registry(self):
        assert set(ALGORITHM_REGISTRY) == {"pimbrl", "mbrl", "mfrl"}

    def test_entry_point_overrides_algo(self, small_run_config):
        artifacts = run_mfrl(small_run_config(algo="pimbrl", **{"loop.total_steps": 60}))
        echoed = json.loads((artifacts.output_dir / "config.json").read_text())
        assert echoed["algo"] == "mfrl"

    def test_evaluate_checkpoint(self, small_run_config):
        artifacts = run_experiment(small_run_config(**{"loop.total_steps": 60}))
        stats = evaluate_checkpoint(artifacts.checkpoint_dir, 3, seed=7)
        lines = (artifacts.checkpoint_dir / "eval.csv").read_text().splitlines()
        assert lines[0] == "episode,seed,return"
        assert [line.split(",")[1] for line in lines[1:]] == ["7", "8", "9"]
        assert len(stats.returns) == 3
