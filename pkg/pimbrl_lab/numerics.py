"""
Periodic finite-difference stencils and explicit time integrators.

Used by the simulated PDE environments and, through the same code path, by the
physics-informed loss of the transition model. Every stencil is applied as a
dense circulant matrix, so the same call works on numpy arrays and on tape
tensors (``pimbrl_lab.neural.tape.Tensor``) and gives bitwise-identical values
in both cases.

Stencil coefficient tables (uniform spacing h, periodic wraparound):

- ``CENTRAL4_D2``: ``(-1, 16, -30, 16, -1) / 12h^2``, truncation O(h^4)
- ``CENTRAL6_D2``: ``(1/90, -3/20, 3/2, -49/18, 3/2, -3/20, 1/90) / h^2``, O(h^6)
- ``CENTRAL6_D4``: ``(7/240, -2/5, 169/60, -122/15, 91/8, ...) / h^4``, O(h^6)
- ``CENTRAL6_D1``: ``(-1/60, 3/20, -3/4, 0, 3/4, -3/20, 1/60) / h``, O(h^6)
- ``UPWIND2_CONVECTION``: ``u_i * D u_i`` with the one-sided second-order
  difference ``(3u_i - 4u_{i-1} + u_{i-2}) / 2h`` where ``u_i > 0``, the mirrored
  forward difference where ``u_i < 0``, and the mean of both where ``u_i = 0``.
  Advective form, O(h^2).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any, Callable, Dict, Sequence, Tuple, Union

import numpy as np

from pimbrl_lab.errors import DegenerateFitError, NumericBlowupError, ShapeMismatchError

logger = logging.getLogger(__name__)

# Errors below this are treated as round-off when fitting convergence orders
ERROR_FLOOR = 1e-13


class StencilKind(Enum):
    """Spatial operators available on a periodic grid."""

    UPWIND2_CONVECTION = "upwind2_convection"
    CENTRAL4_D2 = "central4_d2"
    CENTRAL6_D2 = "central6_d2"
    CENTRAL6_D4 = "central6_d4"
    CENTRAL6_D1 = "central6_d1"


# offset -> coefficient, and the power of the spacing dividing the sum
_LINEAR_STENCILS: Dict[StencilKind, Tuple[Dict[int, float], int]] = {
    StencilKind.CENTRAL4_D2: (
        {-2: -1 / 12, -1: 16 / 12, 0: -30 / 12, 1: 16 / 12, 2: -1 / 12},
        2,
    ),
    StencilKind.CENTRAL6_D2: (
        {-3: 1 / 90, -2: -3 / 20, -1: 3 / 2, 0: -49 / 18, 1: 3 / 2, 2: -3 / 20, 3: 1 / 90},
        2,
    ),
    StencilKind.CENTRAL6_D4: (
        {
            -4: 7 / 240,
            -3: -2 / 5,
            -2: 169 / 60,
            -1: -122 / 15,
            0: 91 / 8,
            1: -122 / 15,
            2: 169 / 60,
            3: -2 / 5,
            4: 7 / 240,
        },
        4,
    ),
    StencilKind.CENTRAL6_D1: (
        {-3: -1 / 60, -2: 3 / 20, -1: -3 / 4, 1: 3 / 4, 2: -3 / 20, 3: 1 / 60},
        1,
    ),
}

_BACKWARD2 = {0: 1.5, -1: -2.0, -2: 0.5}
_FORWARD2 = {0: -1.5, 1: 2.0, 2: -0.5}

NOMINAL_ORDERS = {
    StencilKind.UPWIND2_CONVECTION: 2.0,
    StencilKind.CENTRAL4_D2: 4.0,
    StencilKind.CENTRAL6_D2: 6.0,
    StencilKind.CENTRAL6_D4: 6.0,
    StencilKind.CENTRAL6_D1: 6.0,
}


@dataclass(frozen=True)
class Grid1D:
    """Uniform periodic grid on [0, length); node ``n_points`` wraps to node 0."""

    n_points: int
    length: float

    def __post_init__(self) -> None:
        if self.n_points <= 0:
            raise ValueError(f"n_points must be positive, got {self.n_points}")
        if not self.length > 0:
            raise ValueError(f"length must be positive, got {self.length}")

    @property
    def spacing(self) -> float:
        return self.length / self.n_points

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_points) * self.spacing


@lru_cache(maxsize=64)
def _circulant(n_points: int, offsets: Tuple[Tuple[int, float], ...]) -> np.ndarray:
    matrix = np.zeros((n_points, n_points))
    rows = np.arange(n_points)
    for offset, weight in offsets:
        matrix[rows, (rows + offset) % n_points] += weight
    matrix.setflags(write=False)
    return matrix


def stencil_matrix(grid: Grid1D, offsets: Dict[int, float], spacing_power: int) -> np.ndarray:
    """Dense circulant matrix ``M`` such that ``M @ u`` applies the stencil."""
    base = _circulant(grid.n_points, tuple(sorted(offsets.items())))
    return base / grid.spacing**spacing_power


def _values(u: Any) -> np.ndarray:
    return np.asarray(getattr(u, "value", u))


def _apply_matrix(u: Any, matrix: np.ndarray) -> Any:
    # row-vector convention so leading batch axes pass through
    return u @ matrix.T


def apply_stencil(u: Any, kind: StencilKind, grid: Grid1D) -> Any:
    """
    Apply a periodic stencil along the last axis of ``u``.

    Args:
        u: Field(s) over the grid, shape ``(..., n_points)``; numpy array or tape tensor
        kind: Which operator to apply
        grid: The periodic grid the field lives on

    Returns:
        The discrete derivative (``u * u_x`` for ``UPWIND2_CONVECTION``), same type as ``u``

    Raises:
        ShapeMismatchError: If the last axis of ``u`` is not ``grid.n_points`` long
    """
    shape = tuple(getattr(u, "shape", np.shape(u)))
    if not shape or shape[-1] != grid.n_points:
        raise ShapeMismatchError(
            f"Field length {shape[-1] if shape else 0} does not match grid of {grid.n_points}"
        )

    if kind is StencilKind.UPWIND2_CONVECTION:
        return _upwind_convection(u, grid)

    offsets, power = _LINEAR_STENCILS[kind]
    return _apply_matrix(u, stencil_matrix(grid, offsets, power))


def _upwind_convection(u: Any, grid: Grid1D) -> Any:
    velocity = _values(u)
    positive = (velocity > 0).astype(float)
    negative = (velocity < 0).astype(float)
    tie = 1.0 - positive - negative

    backward = _apply_matrix(u, stencil_matrix(grid, _BACKWARD2, 1))
    forward = _apply_matrix(u, stencil_matrix(grid, _FORWARD2, 1))
    # masks are locally constant in u; the sign switch carries no gradient
    derivative = positive * backward + negative * forward + (0.5 * tie) * (backward + forward)
    return u * derivative


def _check_finite(value: Any, step_index: int) -> None:
    if not np.all(np.isfinite(_values(value))):
        raise NumericBlowupError("Right-hand side produced non-finite values", step_index)


def euler_step(
    rhs: Callable[[Any], Any], u: Any, dt: float, step_index: int = 0
) -> Any:
    """Forward Euler update ``u + dt * rhs(u)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    k1 = rhs(u)
    _check_finite(k1, step_index)
    return u + dt * k1


def rk4_step(rhs: Callable[[Any], Any], u: Any, dt: float, step_index: int = 0) -> Any:
    """Classical four-stage Runge-Kutta update."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    k1 = rhs(u)
    _check_finite(k1, step_index)
    k2 = rhs(u + 0.5 * dt * k1)
    _check_finite(k2, step_index)
    k3 = rhs(u + 0.5 * dt * k2)
    _check_finite(k3, step_index)
    k4 = rhs(u + dt * k3)
    _check_finite(k4, step_index)
    return u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


Integrator = Callable[[Callable[[Any], Any], Any, float], Any]

INTEGRATORS: Dict[str, Integrator] = {"euler": euler_step, "rk4": rk4_step}

INTEGRATOR_ORDERS = {"euler": 1.0, "rk4": 4.0}


# Manufactured cases for convergence measurement


@dataclass(frozen=True)
class SinusoidCase:
    """``u = sin(k x)`` on a periodic domain, refined over ``resolutions`` grid sizes."""

    length: float = 8 * np.pi
    wavenumber: float = 0.25
    resolutions: Sequence[int] = field(default=(16, 32, 64))

    def exact(self, kind: StencilKind, x: np.ndarray) -> np.ndarray:
        k = self.wavenumber
        s, c = np.sin(k * x), np.cos(k * x)
        if kind is StencilKind.UPWIND2_CONVECTION:
            return s * k * c
        if kind is StencilKind.CENTRAL6_D1:
            return k * c
        if kind in (StencilKind.CENTRAL4_D2, StencilKind.CENTRAL6_D2):
            return -(k**2) * s
        return k**4 * s

    def error(self, kind: StencilKind, n_points: int) -> Tuple[float, float]:
        grid = Grid1D(n_points, self.length)
        x = grid.nodes
        approx = apply_stencil(np.sin(self.wavenumber * x), kind, grid)
        return grid.spacing, float(np.max(np.abs(approx - self.exact(kind, x))))


@dataclass(frozen=True)
class DecayCase:
    """``du/dt = -rate * u`` from ``u(0) = 1`` integrated to ``horizon``."""

    rate: float = 1.0
    horizon: float = 1.0
    step_counts: Sequence[int] = field(default=(10, 20, 40))

    def error(self, integrator: Integrator, n_steps: int) -> Tuple[float, float]:
        dt = self.horizon / n_steps
        u = np.array([1.0])
        for i in range(n_steps):
            u = integrator(lambda v: -self.rate * v, u, dt, i)
        exact = np.exp(-self.rate * self.horizon)
        return dt, float(abs(u[0] - exact))


ManufacturedCase = Union[SinusoidCase, DecayCase]


def estimate_order(
    scheme: Union[StencilKind, Integrator, str], case: ManufacturedCase
) -> float:
    """
    Empirical convergence order: least-squares slope of log(error) against log(h).

    Args:
        scheme: A stencil kind (with a ``SinusoidCase``) or an integrator / integrator
            name (with a ``DecayCase``)
        case: The manufactured solution and its refinement ladder (at least 3 levels)

    Returns:
        The fitted order (positive for a converging scheme)

    Raises:
        DegenerateFitError: If any error is below the floating-point floor
    """
    if isinstance(scheme, StencilKind):
        if not isinstance(case, SinusoidCase):
            raise TypeError("Stencil kinds are measured on a SinusoidCase")
        samples = [case.error(scheme, n) for n in case.resolutions]
    else:
        integrator = INTEGRATORS[scheme] if isinstance(scheme, str) else scheme
        if not isinstance(case, DecayCase):
            raise TypeError("Integrators are measured on a DecayCase")
        samples = [case.error(integrator, n) for n in case.step_counts]

    if len(samples) < 3:
        raise DegenerateFitError(f"Need at least 3 refinements, got {len(samples)}")
    spacings, errors = map(np.asarray, zip(*samples))
    if np.any(errors < ERROR_FLOOR):
        raise DegenerateFitError(
            f"Error {errors.min():.3e} is below the floating-point floor {ERROR_FLOOR:.0e}"
        )

    slope, _ = np.polyfit(np.log(spacings), np.log(errors), 1)
    logger.debug("Measured order %.3f for %s", slope, scheme)
    return float(slope)
