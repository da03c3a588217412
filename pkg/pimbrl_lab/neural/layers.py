"""
Dense, LSTM and circular-convolution building blocks.

Each block is described by a small frozen spec that knows how to initialize
its named arrays and how to run a forward pass over a parameter mapping. The
mapping may hold plain arrays (inference) or watched tape tensors (training);
the forward code is the same in both cases.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Sequence, Tuple

import numpy as np

from pimbrl_lab.errors import ShapeMismatchError
from pimbrl_lab.neural import tape as T

Params = Mapping[str, Any]

ACTIVATIONS: Dict[str, Callable[[Any], Any]] = {
    "linear": T.identity,
    "tanh": T.tanh,
    "relu": T.relu,
    "sigmoid": T.sigmoid,
}


def _activation(name: str) -> Callable[[Any], Any]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(
            f"Unknown activation '{name}'. Available: {', '.join(sorted(ACTIVATIONS))}"
        ) from None


def _shape(x: Any) -> Tuple[int, ...]:
    return tuple(getattr(x, "shape", np.shape(x)))


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_dense(
    rng: np.random.Generator, prefix: str, fan_in: int, fan_out: int, scale: float = 1.0
) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.W": scale * uniform_fan_in(rng, fan_in, (fan_in, fan_out)),
        f"{prefix}.b": scale * uniform_fan_in(rng, fan_in, (fan_out,)),
    }


def dense_forward(params: Params, prefix: str, x: Any, activation: str = "linear") -> Any:
    """
    ``activation(x @ W + b)`` for a layer stored under ``prefix``.

    ``x`` may be a single vector or a batch of row vectors.

    Raises:
        ShapeMismatchError: If the input width does not match the layer
    """
    weight = params[f"{prefix}.W"]
    if _shape(x)[-1:] != _shape(weight)[:1]:
        raise ShapeMismatchError(
            f"Layer '{prefix}' expects width {_shape(weight)[0]}, got input shape {_shape(x)}"
        )
    return _activation(activation)(x @ weight + params[f"{prefix}.b"])


def init_lstm(
    rng: np.random.Generator, prefix: str, input_size: int, hidden_size: int
) -> Dict[str, np.ndarray]:
    # gate blocks are ordered input, forget, candidate, output
    return {
        f"{prefix}.Wx": uniform_fan_in(rng, hidden_size, (input_size, 4 * hidden_size)),
        f"{prefix}.Wh": uniform_fan_in(rng, hidden_size, (hidden_size, 4 * hidden_size)),
        f"{prefix}.b": uniform_fan_in(rng, hidden_size, (4 * hidden_size,)),
    }


def lstm_cell_step(params: Params, prefix: str, x: Any, hidden: Any, cell: Any) -> Tuple[Any, Any]:
    """One gated LSTM update; returns ``(hidden', cell')``."""
    wx, wh = params[f"{prefix}.Wx"], params[f"{prefix}.Wh"]
    size = _shape(wh)[0]
    if _shape(x)[-1] != _shape(wx)[0] or _shape(hidden)[-1] != size or _shape(cell)[-1] != size:
        raise ShapeMismatchError(
            f"LSTM '{prefix}' expects input {_shape(wx)[0]} and state {size}, got "
            f"{_shape(x)}, {_shape(hidden)}, {_shape(cell)}"
        )
    gates = x @ wx + hidden @ wh + params[f"{prefix}.b"]
    input_gate = T.sigmoid(gates[..., 0:size])
    forget_gate = T.sigmoid(gates[..., size : 2 * size])
    candidate = T.tanh(gates[..., 2 * size : 3 * size])
    output_gate = T.sigmoid(gates[..., 3 * size : 4 * size])
    new_cell = forget_gate * cell + input_gate * candidate
    return output_gate * T.tanh(new_cell), new_cell


def init_conv(
    rng: np.random.Generator, prefix: str, in_channels: int, out_channels: int, kernel_size: int
) -> Dict[str, np.ndarray]:
    fan_in = in_channels * kernel_size
    return {
        f"{prefix}.W": uniform_fan_in(rng, fan_in, (out_channels, in_channels, kernel_size)),
        f"{prefix}.b": uniform_fan_in(rng, fan_in, (out_channels,)),
    }


def conv1d_circular(params: Params, prefix: str, x: Any) -> Any:
    """
    Stride-1 convolution with circular padding over ``x`` of shape (batch, channels, n).

    Output keeps the grid length, so a circular shift of the input shifts every
    output map by the same amount.
    """
    weight = params[f"{prefix}.W"]
    out_channels, in_channels, kernel_size = _shape(weight)
    batch, channels, n_points = _shape(x)
    if channels != in_channels:
        raise ShapeMismatchError(
            f"Conv '{prefix}' expects {in_channels} channels, got {channels}"
        )
    offsets = np.arange(kernel_size) - kernel_size // 2
    windows = (np.arange(n_points)[:, None] + offsets[None, :]) % n_points
    patches = T.take(x, windows, axis=2)
    patches = T.reshape(
        T.transpose(patches, (0, 2, 1, 3)), (batch, n_points, in_channels * kernel_size)
    )
    kernel = T.reshape(weight, (out_channels, in_channels * kernel_size))
    out = patches @ T.transpose(kernel) + params[f"{prefix}.b"]
    return T.transpose(out, (0, 2, 1))


@dataclass(frozen=True)
class MlpSpec:
    """Stack of dense layers ``sizes[0] -> ... -> sizes[-1]``."""

    sizes: Tuple[int, ...]
    prefix: str = "mlp"
    activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self) -> None:
        if len(self.sizes) < 2:
            raise ValueError("An MLP needs at least input and output sizes")
        _activation(self.activation)
        _activation(self.output_activation)

    def layer_names(self) -> Sequence[str]:
        return [f"{self.prefix}.{i}" for i in range(len(self.sizes) - 1)]

    def init(self, rng: np.random.Generator, final_scale: float = 1.0) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        names = self.layer_names()
        for i, name in enumerate(names):
            scale = final_scale if i == len(names) - 1 else 1.0
            arrays.update(init_dense(rng, name, self.sizes[i], self.sizes[i + 1], scale))
        return arrays

    def forward(self, params: Params, x: Any) -> Any:
        names = self.layer_names()
        for i, name in enumerate(names):
            last = i == len(names) - 1
            x = dense_forward(params, name, x, self.output_activation if last else self.activation)
        return x


@dataclass(frozen=True)
class ConvEncoderSpec:
    """Circular conv stack over a periodic field, flattened and projected to a latent."""

    n_points: int
    latent_size: int = 64
    channels: Tuple[int, ...] = field(default=(16, 32))
    kernel_size: int = 5
    prefix: str = "encoder"
    activation: str = "tanh"
    head_activation: str = "linear"

    def init(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        arrays: Dict[str, np.ndarray] = {}
        in_channels = 1
        for i, out_channels in enumerate(self.channels):
            arrays.update(
                init_conv(rng, f"{self.prefix}.conv{i}", in_channels, out_channels, self.kernel_size)
            )
            in_channels = out_channels
        arrays.update(
            init_dense(rng, f"{self.prefix}.head", in_channels * self.n_points, self.latent_size)
        )
        return arrays

    def feature_maps(self, params: Params, fields: Any) -> Any:
        """Pre-flatten maps, shape (batch, channels[-1], n_points)."""
        shape = _shape(fields)
        if shape[-1] != self.n_points:
            raise ShapeMismatchError(
                f"Encoder expects fields of {self.n_points} points, got shape {shape}"
            )
        x = T.reshape(fields, (-1, 1, self.n_points))
        act = _activation(self.activation)
        for i in range(len(self.channels)):
            x = act(conv1d_circular(params, f"{self.prefix}.conv{i}", x))
        return x

    def forward(self, params: Params, fields: Any) -> Any:
        maps = self.feature_maps(params, fields)
        batch = _shape(maps)[0]
        flat = T.reshape(maps, (batch, self.channels[-1] * self.n_points))
        latent = dense_forward(params, f"{self.prefix}.head", flat, self.head_activation)
        if len(_shape(fields)) == 1:
            latent = latent[0]
        return latent


def conv_encode(spec: ConvEncoderSpec, params: Params, field_values: Any) -> Any:
    """Encode one field (or a batch of fields) to latent vectors."""
    return spec.forward(params, field_values)
