"""Exception hierarchy shared by every PiMBRL Lab module."""

from typing import Any, Dict, List, Optional


class PimbrlError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(PimbrlError):
    """Invalid configuration. Carries every violation found, not just the first."""

    def __init__(self, message: str, violations: Optional[List[str]] = None):
        self.violations = list(violations or [])
        if self.violations:
            message = f"{message}:\n" + "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(message)


class UsageError(PimbrlError):
    """An API was called in a state where the call is not allowed."""


class ShapeMismatchError(PimbrlError, ValueError):
    """Array arguments have incompatible shapes."""


class NumericBlowupError(PimbrlError, ArithmeticError):
    """A time integrator produced non-finite values."""

    def __init__(self, message: str, step_index: Optional[int] = None):
        self.step_index = step_index
        if step_index is not None:
            message = f"{message} (step {step_index})"
        super().__init__(message)


class EnvironmentDivergedError(NumericBlowupError):
    """The ground-truth simulator of an environment blew up during a control step."""

    def __init__(self, env_id: str, step_index: Optional[int] = None):
        self.env_id = env_id
        super().__init__(f"Environment '{env_id}' diverged", step_index=step_index)


class NonFiniteTransitionError(PimbrlError, ValueError):
    """A transition with NaN/inf fields was pushed into a replay buffer."""


class EmptyBufferError(PimbrlError):
    """Sampling was requested from buffers that hold no transitions."""


class DegenerateFitError(PimbrlError):
    """Convergence-order fit is meaningless because errors hit the floating-point floor."""


class MetricsOrderError(PimbrlError, ValueError):
    """A metrics row would break the strictly increasing real_steps invariant."""


class DuplicateRunError(PimbrlError):
    """A submitted config matches a run that is queued, running or submitted alongside it."""

    def __init__(self, message: str, duplicate_info: Optional[Dict[str, Any]] = None):
        self.duplicate_info = duplicate_info
        super().__init__(message)
