"""Pydantic models and registries for the PiMBRL run service."""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from pimbrl_lab.environments import ENVIRONMENT_REGISTRY
from pimbrl_lab.orchestrator import ALGORITHM_REGISTRY


class RunExperimentRequest(BaseModel):
    """Request model for submitting a training run."""

    env: str = Field(..., description="Environment id (e.g., 'cartpole')")
    algo: str = Field("pimbrl", description="Algorithm variant: mfrl, mbrl or pimbrl")
    seed: int = Field(0, description="Master seed of the run")
    steps: Optional[int] = Field(None, description="Real environment steps (config default if not provided)")
    output_dir: Optional[str] = Field(
        None, description="Run output directory (derived from env, algo and seed if not provided)"
    )
    overrides: Dict[str, Any] = Field(
        default_factory=dict,
        description="Dotted-key config overrides, e.g. {'model.rollout_length': 8}",
    )


class RunAcceptedResponse(BaseModel):
    """Response model for an accepted run."""

    status: str = Field(..., description="'queued' or 'started'")
    run_id: str = Field(..., description="Hash of the resolved config")
    output_dir: str = Field(..., description="Where metrics and checkpoints will be written")
    details: Dict[str, Any] = Field(..., description="Queue position and resolved settings")


class SweepRequest(BaseModel):
    """One config parameter varied over values, each value run for several seeds."""

    env: str = Field(..., description="Environment id")
    algo: str = Field("pimbrl", description="Algorithm variant")
    parameter: str = Field(..., description="Dotted config key, e.g. 'model.rollout_length'")
    values: List[Any] = Field(..., min_length=1, description="Values of the swept parameter")
    seeds: List[int] = Field(default_factory=lambda: [0], description="Seeds per value")
    steps: Optional[int] = Field(None, description="Real environment steps per run")
    output_dir: str = Field("runs/sweep", description="Root directory of the sweep")


# Registries of what the service can run
ENVIRONMENTS = sorted(ENVIRONMENT_REGISTRY)
ALGORITHMS = sorted(ALGORITHM_REGISTRY)
