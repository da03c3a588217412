"""Adam optimizer over a ParameterSet."""

from typing import Mapping

import numpy as np

from pimbrl_lab.errors import NumericBlowupError
from pimbrl_lab.neural.params import ParameterSet

DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPSILON = 1e-8


def adam_update(
    params: ParameterSet,
    gradients: Mapping[str, np.ndarray],
    lr: float = DEFAULT_LEARNING_RATE,
    beta1: float = DEFAULT_BETA1,
    beta2: float = DEFAULT_BETA2,
    eps: float = DEFAULT_EPSILON,
) -> ParameterSet:
    """
    One bias-corrected Adam step, applied in place.

    Args:
        params: Parameters and their moments; ``step`` is incremented
        gradients: Gradient per parameter name, same shapes as ``params``
        lr: Learning rate
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator floor

    Returns:
        ``params`` itself, updated

    Raises:
        ShapeMismatchError: If gradient names or shapes do not match
        NumericBlowupError: If the update would leave a non-finite parameter or moment;
            ``params`` is left untouched
    """
    params.check_compatible(gradients)
    t = params.step + 1
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t

    # nothing is written back until every new value is finite
    staged = {}
    for name, value in params.arrays.items():
        g = gradients[name]
        m = beta1 * params.first_moment[name] + (1.0 - beta1) * g
        v = beta2 * params.second_moment[name] + (1.0 - beta2) * g * g
        new_value = value - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        if not all(np.all(np.isfinite(x)) for x in (new_value, m, v)):
            raise NumericBlowupError(f"Adam step {t} would leave '{name}' non-finite")
        staged[name] = (new_value, m, v)

    for name, (new_value, m, v) in staged.items():
        params.arrays[name][...] = new_value
        params.first_moment[name][...] = m
        params.second_moment[name][...] = v
    params.step = t
    return params
