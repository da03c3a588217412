"""Tests for layers, parameter sets, checkpoints and the Adam step."""

import numpy as np
import pytest

from pimbrl_lab.errors import NumericBlowupError, ShapeMismatchError
from pimbrl_lab.neural import (
    ConvEncoderSpec,
    MlpSpec,
    ParameterSet,
    adam_update,
    dense_forward,
    load_checkpoint,
    lstm_cell_step,
    save_checkpoint,
)
from pimbrl_lab.neural.layers import init_dense, init_lstm


@pytest.fixture
def params():
    return ParameterSet(MlpSpec(sizes=(3, 4, 2)).init(np.random.default_rng(0)))


class TestLayers:
    """Forward shapes and input validation."""

    def test_mlp_shapes(self):
        spec = MlpSpec(sizes=(3, 8, 2), output_activation="tanh")
        arrays = spec.init(np.random.default_rng(0))
        assert spec.forward(arrays, np.zeros(3)).shape == (2,)
        out = spec.forward(arrays, np.full((5, 3), 100.0))
        assert out.shape == (5, 2)
        assert np.all(np.abs(out) <= 1.0)

    def test_final_scale_shrinks_last_layer(self):
        spec = MlpSpec(sizes=(3, 8, 2))
        small = spec.init(np.random.default_rng(0), final_scale=0.01)
        full = spec.init(np.random.default_rng(0))
        assert np.allclose(small["mlp.1.W"], 0.01 * full["mlp.1.W"])
        assert np.array_equal(small["mlp.0.W"], full["mlp.0.W"])

    def test_dense_width_mismatch(self):
        arrays = init_dense(np.random.default_rng(0), "layer", 3, 2)
        with pytest.raises(ShapeMismatchError):
            dense_forward(arrays, "layer", np.zeros(4))

    def test_lstm_state_mismatch(self):
        arrays = init_lstm(np.random.default_rng(0), "cell", 2, 3)
        with pytest.raises(ShapeMismatchError):
            lstm_cell_step(arrays, "cell", np.zeros(2), np.zeros(4), np.zeros(3))

    def test_lstm_output_bounded(self):
        arrays = init_lstm(np.random.default_rng(0), "cell", 2, 3)
        hidden, cell = lstm_cell_step(arrays, "cell", np.full(2, 50.0), np.zeros(3), np.zeros(3))
        assert hidden.shape == cell.shape == (3,)
        assert np.all(np.abs(hidden) < 1.0)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            MlpSpec(sizes=(2, 2), activation="swish")

    def test_mlp_needs_two_sizes(self):
        with pytest.raises(ValueError):
            MlpSpec(sizes=(3,))

    def test_conv_maps_are_shift_equivariant(self):
        spec = ConvEncoderSpec(n_points=16, latent_size=4, channels=(2, 3), kernel_size=3)
        arrays = spec.init(np.random.default_rng(0))
        field = np.random.default_rng(1).standard_normal(16)
        maps = spec.feature_maps(arrays, field)
        shifted = spec.feature_maps(arrays, np.roll(field, 5))
        assert np.allclose(shifted, np.roll(maps, 5, axis=-1))

    def test_encoder_single_and_batch(self):
        spec = ConvEncoderSpec(n_points=16, latent_size=4, channels=(2,), kernel_size=3)
        arrays = spec.init(np.random.default_rng(0))
        fields = np.random.default_rng(1).standard_normal((3, 16))
        batch = spec.forward(arrays, fields)
        assert batch.shape == (3, 4)
        assert np.allclose(spec.forward(arrays, fields[1]), batch[1])

    def test_encoder_wrong_grid(self):
        spec = ConvEncoderSpec(n_points=16, latent_size=4, channels=(2,), kernel_size=3)
        with pytest.raises(ShapeMismatchError):
            spec.forward(spec.init(np.random.default_rng(0)), np.zeros(12))


class TestParameterSet:
    """Copies, compatibility checks and distances."""

    def test_copy_is_independent(self, params):
        clone = params.copy()
        clone.arrays["mlp.0.W"] += 1.0
        assert params.distance(clone) > 0.0

    def test_assign_copies_values(self, params):
        other = ParameterSet({k: np.zeros_like(v) for k, v in params.arrays.items()})
        params.assign(other)
        assert params.distance(other) == 0.0

    def test_incompatible_names(self, params):
        with pytest.raises(ShapeMismatchError):
            params.check_compatible({"mlp.0.W": params["mlp.0.W"]})

    def test_incompatible_shapes(self, params):
        arrays = {k: v for k, v in params.arrays.items()}
        arrays["mlp.0.b"] = np.zeros(7)
        with pytest.raises(ShapeMismatchError):
            params.check_compatible(arrays)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericBlowupError):
            ParameterSet({"w": np.array([1.0, np.nan])})


class TestCheckpoint:
    """Binary checkpoint round trip."""

    def test_round_trip(self, tmp_path, params):
        adam_update(params, {k: np.ones_like(v) for k, v in params.arrays.items()})
        path = tmp_path / "nets.ckpt"
        save_checkpoint(path, {"actor": params}, {"update_count": 17})

        loaded, counters = load_checkpoint(path)
        restored = loaded["actor"]
        assert counters == {"update_count": 17}
        assert restored.step == 1
        for name in params:
            assert np.array_equal(restored[name], params[name])
            assert np.array_equal(restored.first_moment[name], params.first_moment[name])
            assert np.array_equal(restored.second_moment[name], params.second_moment[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError):
            load_checkpoint(path)


class TestAdam:
    """Bias-corrected Adam steps."""

    def test_first_step_moves_by_learning_rate(self, params):
        before = params.copy()
        grads = {k: np.where(np.arange(v.size).reshape(v.shape) % 2, 3.0, -0.5) for k, v in params.arrays.items()}
        adam_update(params, grads, lr=1e-3)
        for name in params:
            step = params[name] - before[name]
            assert np.allclose(step, -1e-3 * np.sign(grads[name]), rtol=1e-4)
        assert params.step == 1

    def test_zero_gradient_leaves_values(self, params):
        before = params.copy()
        adam_update(params, {k: np.zeros_like(v) for k, v in params.arrays.items()})
        assert params.distance(before) == 0.0

    def test_mismatched_gradients(self, params):
        with pytest.raises(ShapeMismatchError):
            adam_update(params, {"mlp.0.W": np.zeros((3, 4))})

    def test_infinite_gradient_blows_up(self, params):
        grads = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        grads["mlp.0.b"] = np.full_like(grads["mlp.0.b"], np.inf)
        with pytest.raises(NumericBlowupError):
            adam_update(params, grads)

    def test_failed_step_leaves_parameters_untouched(self, params):
        adam_update(params, {k: np.ones_like(v) for k, v in params.arrays.items()})
        before = params.copy()
        grads = {k: np.ones_like(v) for k, v in params.arrays.items()}
        grads["mlp.1.W"] = np.full_like(grads["mlp.1.W"], np.nan)

        with pytest.raises(NumericBlowupError):
            adam_update(params, grads)

        assert params.step == before.step == 1
        for name in params:
            assert np.all(np.isfinite(params[name]))
            assert np.array_equal(params[name], before[name])
            assert np.array_equal(params.first_moment[name], before.first_moment[name])
            assert np.array_equal(params.second_moment[name], before.second_moment[name])
