"""Tests for experiment configuration loading, defaults and validation."""

import json

import pytest

from pimbrl_lab.config import (
    CONFIG_ECHO_FILENAME,
    ExperimentConfig,
    echo_config,
    load_config,
    validate_config,
)
from pimbrl_lab.errors import ConfigurationError


class TestDefaults:
    """Per-environment defaults fill unset values."""

    def test_ks_defaults(self):
        config = load_config(overrides={"env.id": "ks"})
        assert config.model.threshold == 1e-2
        assert config.model.rollout_length == 3
        assert config.model.min_real_samples == 6000
        assert config.model.min_physics_samples == 12000
        assert config.model.intermediate_steps == 10
        assert config.agent.gamma == pytest.approx(0.977)
        assert config.loop.fine_tune_threshold == -55.0
        assert config.loop.fine_tune is True

    def test_cartpole_defaults(self):
        config = load_config(overrides={"env.id": "cartpole"})
        assert config.model.threshold == 1e-4
        assert config.model.intermediate_steps == 1
        assert config.loop.fine_tune is False

    def test_override_wins(self):
        config = load_config(overrides={"env.id": "ks", "model.rollout_length": 8})
        assert config.model.rollout_length == 8

    def test_mbrl_disables_physics_loss(self):
        config = load_config(overrides={"env.id": "pendulum", "algo": "mbrl"})
        assert config.model.physics_loss is False

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"env": {"id": "burgers"}, "seed": 4, "model": {"threshold": 0.5}}))
        config = load_config(path, {"seed": 9})
        assert config.seed == 9
        assert config.model.threshold == 0.5
        assert config.model.rollout_length == 1


class TestValidation:
    """Every violation is reported."""

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigurationError) as excinfo:
            load_config(overrides={"env.id": "ks", "agent.gamma": 1.5})
        assert any("agent.gamma" in v for v in excinfo.value.violations)

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError) as excinfo:
            validate_config({"env": {"id": "ks"}, "model": {"rollout_lenght": 3}})
        assert any("rollout_lenght" in v for v in excinfo.value.violations)

    def test_missing_env_id(self):
        with pytest.raises(ConfigurationError) as excinfo:
            load_config()
        assert any(v.startswith("env.id") for v in excinfo.value.violations)

    def test_all_violations_listed(self):
        with pytest.raises(ConfigurationError) as excinfo:
            validate_config(
                {"env": {"id": "ks"}, "agent": {"gamma": 2.0, "batch_size": 0}, "algo": "dqn"}
            )
        assert len(excinfo.value.violations) == 3
        assert "agent.batch_size" in str(excinfo.value)

    def test_unknown_environment(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides={"env.id": "acrobot"})

    def test_fine_tune_needs_threshold(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides={"env.id": "cartpole", "loop.fine_tune": True})

    def test_even_kernel(self):
        with pytest.raises(ConfigurationError):
            load_config(overrides={"env.id": "burgers", "model.kernel_size": 4})

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_config(path)


class TestEcho:
    """The resolved config is written next to the run."""

    def test_echo_reloads_to_same_config(self, tmp_path):
        config = load_config(overrides={"env.id": "pendulum", "seed": 3})
        path = echo_config(config, tmp_path)
        assert path.name == CONFIG_ECHO_FILENAME
        reloaded = ExperimentConfig.model_validate(json.loads(path.read_text()))
        assert reloaded == config
        assert reloaded.config_hash() == config.config_hash()

    def test_hash_ignores_output_dir(self):
        first = load_config(overrides={"env.id": "pendulum", "output_dir": "a"})
        second = load_config(overrides={"env.id": "pendulum", "output_dir": "b"})
        third = load_config(overrides={"env.id": "pendulum", "seed": 1})
        assert first.config_hash() == second.config_hash()
        assert first.config_hash() != third.config_hash()

    def test_derived_settings(self):
        config = load_config(overrides={"env.id": "ks", "env.episode_length": 5})
        assert config.td3_settings().gamma == pytest.approx(0.977)
        assert config.model_overrides()["n_intermediate"] == 10
        assert config.bank_settings().trajectories == 8
