"""FastAPI service accepting training runs and sweeps into a bounded queue."""

import asyncio
import os
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException

from pimbrl_lab import __version__
from pimbrl_lab.auth import verify_api_key
from pimbrl_lab.config import ExperimentConfig, load_config
from pimbrl_lab.errors import ConfigurationError, DuplicateRunError
from pimbrl_lab.models import (
    ALGORITHMS,
    ENVIRONMENTS,
    RunAcceptedResponse,
    RunExperimentRequest,
    SweepRequest,
)
from pimbrl_lab.queue import ExperimentQueue, check_duplicates, run_sweep, sweep_configs

app = FastAPI(
    title="PiMBRL Lab",
    description="Physics-informed model-based reinforcement learning runs",
    version=__version__,
)

MAX_CONCURRENT_RUNS = int(os.getenv("MAX_CONCURRENT_RUNS", "2"))
experiment_queue = ExperimentQueue(max_concurrent_runs=MAX_CONCURRENT_RUNS)
_sweep_tasks: set = set()


def _resolve(env: str, algo: str, overrides: dict) -> ExperimentConfig:
    if env not in ENVIRONMENTS:
        raise HTTPException(
            status_code=400,
            detail=f"Environment '{env}' is not available. Choose one of: {ENVIRONMENTS}",
        )
    if algo not in ALGORITHMS:
        raise HTTPException(
            status_code=400,
            detail=f"Algorithm '{algo}' is not available. Choose one of: {ALGORITHMS}",
        )
    try:
        return load_config(overrides={**overrides, "env.id": env, "algo": algo})
    except ConfigurationError as e:
        raise HTTPException(
            status_code=400, detail={"message": str(e), "violations": e.violations}
        ) from e


@app.get("/")
async def root(_: str = Depends(verify_api_key)):
    return {
        "name": "PiMBRL Lab",
        "version": __version__,
        "available_environments": ENVIRONMENTS,
        "available_algorithms": ALGORITHMS,
    }


@app.get("/health")
async def health(_: str = Depends(verify_api_key)):
    return {"status": "healthy"}


@app.post("/runs", response_model=RunAcceptedResponse)
async def submit_run(
    request: RunExperimentRequest, _: str = Depends(verify_api_key)
) -> RunAcceptedResponse:
    """
    Queue one training run.

    The request is resolved into a full experiment config first; a config that is
    identical (output directory aside) to a queued or running one is rejected with 409.
    """
    overrides = dict(request.overrides)
    overrides["seed"] = request.seed
    if request.steps is not None:
        overrides["loop.total_steps"] = request.steps
    overrides["output_dir"] = request.output_dir or str(
        Path("runs") / request.env / request.algo / f"seed_{request.seed}"
    )
    config = _resolve(request.env, request.algo, overrides)

    if experiment_queue.is_duplicate(config):
        raise HTTPException(
            status_code=409,
            detail={
                "message": "A run with an identical configuration is already running or queued.",
                "duplicate_info": experiment_queue.get_duplicate_info(config),
            },
        )

    queued = await experiment_queue.enqueue(config)
    status = experiment_queue.get_queue_status()
    return RunAcceptedResponse(
        status="started" if queued.status.value == "running" else "queued",
        run_id=queued.run_id,
        output_dir=config.output_dir,
        details={
            "env": config.env.id,
            "algo": config.algo,
            "seed": config.seed,
            "total_steps": config.loop.total_steps,
            "queue_position": status["queued"],
            "currently_running": status["currently_running"],
        },
    )


@app.post("/sweeps")
async def submit_sweep(request: SweepRequest, _: str = Depends(verify_api_key)):
    """
    Queue a parameter sweep; curve tables appear under ``output_dir`` as its runs finish.

    Like single runs, a sweep containing a run identical to a queued or running one is
    rejected with 409 and nothing is queued.
    """
    overrides = {} if request.steps is None else {"loop.total_steps": request.steps}
    base = _resolve(request.env, request.algo, overrides)
    try:
        configs = sweep_configs(
            base, request.parameter, request.values, request.seeds, Path(request.output_dir)
        )
    except (ConfigurationError, KeyError, TypeError) as e:
        raise HTTPException(status_code=400, detail=f"Invalid sweep: {e}") from e

    try:
        check_duplicates(experiment_queue, [c for group in configs.values() for c in group])
    except DuplicateRunError as e:
        raise HTTPException(
            status_code=409,
            detail={"message": str(e), "duplicate_info": e.duplicate_info},
        ) from e

    task = asyncio.create_task(
        run_sweep(
            experiment_queue,
            base,
            request.parameter,
            request.values,
            request.seeds,
            Path(request.output_dir),
        )
    )
    _sweep_tasks.add(task)
    task.add_done_callback(_sweep_tasks.discard)
    return {
        "status": "queued",
        "parameter": request.parameter,
        "values": request.values,
        "seeds": request.seeds,
        "runs": len(request.values) * len(request.seeds),
        "output_dir": request.output_dir,
    }


@app.get("/queue-status")
async def queue_status(_: str = Depends(verify_api_key)):
    return {
        "queue_status": experiment_queue.get_queue_status(),
        "running_runs": experiment_queue.get_running_runs(),
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host="0.0.0.0", port=8000)
