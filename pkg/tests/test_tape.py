"""Gradient checks for the tape against central finite differences."""

import numpy as np
import pytest

from pimbrl_lab.agent import Td3Agent, Td3Settings
from pimbrl_lab.environments import make_environment
from pimbrl_lab.errors import UsageError
from pimbrl_lab.neural import tape as T
from pimbrl_lab.neural.layers import (
    ConvEncoderSpec,
    MlpSpec,
    conv1d_circular,
    dense_forward,
    init_conv,
    init_dense,
    init_lstm,
    lstm_cell_step,
)

EPS = 1e-6
TOLERANCE = 1e-4


def _scalar(fn, arrays, weights):
    out = fn(arrays)
    return T.sum_(out * weights)


def assert_gradients_match(fn, arrays, seed=0):
    """Compare tape gradients of a weighted sum of ``fn`` with finite differences."""
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    weights = np.random.default_rng(seed).standard_normal(np.shape(T.value_of(fn(arrays))))

    with T.Tape() as tape:
        watched = tape.watch(arrays)
        loss = _scalar(fn, watched, weights)
    analytic = T.backward(tape, loss, watched)

    for name, value in arrays.items():
        numeric = np.zeros_like(value)
        for index in np.ndindex(value.shape):
            shifted = {k: v.copy() for k, v in arrays.items()}
            shifted[name][index] = value[index] + EPS
            upper = float(T.value_of(_scalar(fn, shifted, weights)))
            shifted[name][index] = value[index] - EPS
            lower = float(T.value_of(_scalar(fn, shifted, weights)))
            numeric[index] = (upper - lower) / (2 * EPS)
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic[name]), 1e-12)
        error = np.linalg.norm(analytic[name] - numeric) / scale
        assert error <= TOLERANCE, f"{name}: relative error {error:.3e}"


def _normal(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


ELEMENTWISE_CASES = {
    "add_broadcast": (lambda p: p["a"] + p["b"], {"a": _normal(3, 4), "b": _normal(4, seed=1)}),
    "mul_broadcast": (lambda p: p["a"] * p["b"], {"a": _normal(3, 4), "b": _normal(3, 1, seed=1)}),
    "sub_and_neg": (lambda p: 2.0 - p["a"] - (-p["b"]), {"a": _normal(5), "b": _normal(5, seed=1)}),
    "div": (lambda p: p["a"] / p["b"], {"a": _normal(4), "b": 2.0 + np.abs(_normal(4, seed=1))}),
    "power": (lambda p: p["a"] ** 3, {"a": _normal(6)}),
    "matmul": (lambda p: p["a"] @ p["b"], {"a": _normal(3, 4), "b": _normal(4, 2, seed=1)}),
    "matmul_vector_right": (lambda p: p["a"] @ p["b"], {"a": _normal(3, 4), "b": _normal(4, seed=1)}),
    "matmul_vector_left": (lambda p: p["a"] @ p["b"], {"a": _normal(4), "b": _normal(4, 3, seed=1)}),
    "tanh": (lambda p: T.tanh(p["a"]), {"a": _normal(5)}),
    "sigmoid": (lambda p: T.sigmoid(p["a"]), {"a": _normal(5)}),
    "sin_cos": (lambda p: T.sin(p["a"]) * T.cos(p["a"]), {"a": _normal(5)}),
    "exp": (lambda p: T.exp(p["a"]), {"a": _normal(5)}),
    "sqrt": (lambda p: T.sqrt(p["a"]), {"a": 0.5 + np.abs(_normal(5))}),
    "square": (lambda p: T.square(p["a"]), {"a": _normal(5)}),
    "sum_axis": (lambda p: T.sum_(p["a"], axis=1), {"a": _normal(3, 4)}),
    "mean_keepdims": (lambda p: p["a"] - T.mean(p["a"], axis=0, keepdims=True), {"a": _normal(3, 4)}),
    "reshape_transpose": (
        lambda p: T.transpose(T.reshape(p["a"], (2, 3, 2)), (2, 0, 1)),
        {"a": _normal(12)},
    ),
    "slice": (lambda p: p["a"][..., 1:3], {"a": _normal(2, 4)}),
    "fancy_index_repeats": (lambda p: p["a"][np.array([0, 2, 2, 1])], {"a": _normal(3, 2)}),
    "take_repeats": (
        lambda p: T.take(p["a"], np.array([[0, 1], [1, 1]]), axis=1),
        {"a": _normal(2, 3)},
    ),
    "concat": (lambda p: T.concat([p["a"], p["b"]], axis=-1), {"a": _normal(2, 3), "b": _normal(2, 1, seed=1)}),
    "stack": (lambda p: T.stack([p["a"], 2.0 * p["b"]], axis=0), {"a": _normal(3), "b": _normal(3, seed=1)}),
    "l2_norm": (lambda p: T.l2_norm(p["a"], axis=-1), {"a": _normal(3, 4)}),
}


class TestPrimitiveGradients:
    """Each primitive's backward rule against finite differences."""

    @pytest.mark.parametrize("case", sorted(ELEMENTWISE_CASES))
    def test_primitive(self, case):
        fn, arrays = ELEMENTWISE_CASES[case]
        assert_gradients_match(fn, arrays)


class TestNetworkGradients:
    """Whole network forward passes against finite differences."""

    def test_dense_tanh(self):
        arrays = init_dense(np.random.default_rng(0), "layer", 3, 4)
        x = _normal(5, 3, seed=2)
        assert_gradients_match(lambda p: dense_forward(p, "layer", x, "tanh"), arrays)

    def test_mlp_relu(self):
        spec = MlpSpec(sizes=(3, 6, 5, 2))
        x = _normal(4, 3, seed=2)
        assert_gradients_match(lambda p: spec.forward(p, x), spec.init(np.random.default_rng(0)))

    def test_lstm_multistep(self):
        arrays = init_lstm(np.random.default_rng(0), "cell", 3, 4)
        inputs = _normal(3, 2, 3, seed=2)

        def unroll(p):
            hidden = np.zeros((2, 4))
            cell = np.zeros((2, 4))
            outputs = []
            for x in inputs:
                hidden, cell = lstm_cell_step(p, "cell", x, hidden, cell)
                outputs.append(hidden)
            return T.stack(outputs, axis=0)

        assert_gradients_match(unroll, arrays)

    def test_conv1d_circular(self):
        arrays = init_conv(np.random.default_rng(0), "conv", 2, 3, 3)
        x = _normal(2, 2, 8, seed=2)
        assert_gradients_match(lambda p: conv1d_circular(p, "conv", x), arrays)

    def test_conv_encoder(self):
        spec = ConvEncoderSpec(n_points=16, latent_size=4, channels=(2, 3), kernel_size=3)
        fields = _normal(2, 16, seed=2)
        assert_gradients_match(lambda p: spec.forward(p, fields), spec.init(np.random.default_rng(0)))

    def test_conv_encoder_wrt_input_field(self):
        spec = ConvEncoderSpec(n_points=16, latent_size=4, channels=(2,), kernel_size=3)
        params = spec.init(np.random.default_rng(0))
        assert_gradients_match(lambda p: spec.forward(params, p["field"]), {"field": _normal(16, seed=3)})

    @pytest.fixture
    def agent(self):
        settings = Td3Settings(hidden_sizes=(8, 8), actor_final_scale=1.0)
        return Td3Agent(make_environment("pendulum").spec, settings, np.random.default_rng(0))

    def test_critic(self, agent):
        observations = _normal(4, 2, seed=2)
        actions = np.tanh(_normal(4, 1, seed=3))
        assert_gradients_match(
            lambda p: agent.q_value(p, observations, actions), agent.critic1.arrays
        )

    def test_actor(self, agent):
        observations = _normal(4, 2, seed=2)
        assert_gradients_match(lambda p: agent.policy(p, observations), agent.actor.arrays)

    def test_actor_through_critic(self, agent):
        """The deterministic policy-gradient path: critic frozen, actor watched."""
        observations = _normal(4, 2, seed=2)
        critic = agent.critic1.arrays
        assert_gradients_match(
            lambda p: agent.q_value(critic, observations, agent.policy(p, observations)),
            agent.actor.arrays,
        )


class TestTapeBehaviour:
    """Recording rules and error cases."""

    def test_shared_leaf_accumulates(self):
        with T.Tape() as tape:
            watched = tape.watch({"x": np.array([1.5, -2.0])})
            loss = T.sum_(watched["x"] * watched["x"])
        grads = T.backward(tape, loss, watched)
        assert np.allclose(grads["x"], [3.0, -4.0])

    def test_unused_leaf_gets_zeros(self):
        with T.Tape() as tape:
            watched = tape.watch({"x": np.ones(2), "unused": np.ones((2, 3))})
            loss = T.sum_(watched["x"])
        grads = T.backward(tape, loss, watched)
        assert np.array_equal(grads["unused"], np.zeros((2, 3)))

    def test_plain_arrays_bypass_the_tape(self):
        with T.Tape() as tape:
            result = T.tanh(np.zeros(3))
        assert isinstance(result, np.ndarray)
        assert tape.records == []

    def test_no_recording_outside_tape(self):
        x = T.Tensor(np.ones(2), requires_grad=True)
        with T.Tape() as tape:
            pass
        T.sum_(x * 2.0)
        assert tape.records == []

    def test_empty_tape(self):
        with T.Tape() as tape:
            watched = tape.watch({"x": np.ones(2)})
        with pytest.raises(UsageError):
            T.backward(tape, watched["x"], watched)

    def test_foreign_output(self):
        with T.Tape() as tape:
            watched = tape.watch({"x": np.ones(2)})
            T.sum_(watched["x"])
        stray = T.Tensor(np.ones(()), requires_grad=True)
        with pytest.raises(UsageError):
            T.backward(tape, stray, watched)

    def test_non_scalar_output_needs_seed(self):
        with T.Tape() as tape:
            watched = tape.watch({"x": np.ones(3)})
            out = watched["x"] * 2.0
        with pytest.raises(UsageError):
            T.backward(tape, out, watched)
        grads = T.backward(tape, out, watched, output_grad=np.array([1.0, 0.0, 2.0]))
        assert np.allclose(grads["x"], [2.0, 0.0, 4.0])
