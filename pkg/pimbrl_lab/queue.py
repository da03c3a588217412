"""Run queue with bounded concurrency and duplicate detection, plus parameter sweeps."""

import asyncio
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from pimbrl_lab.config import ExperimentConfig, validate_config
from pimbrl_lab.errors import DuplicateRunError
from pimbrl_lab.metrics import METRICS_FILENAME
from pimbrl_lab.orchestrator import RunArtifacts, run_experiment
from pimbrl_lab.reports import emit_curve_data

logger = logging.getLogger(__name__)

COMPLETED_HISTORY = 100

Runner = Callable[[ExperimentConfig], RunArtifacts]


class RunStatus(Enum):
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class QueuedRun:
    """A submitted run and its lifecycle timestamps."""

    config: ExperimentConfig
    run_id: str
    status: RunStatus = RunStatus.QUEUED
    queued_at: datetime = field(default_factory=datetime.now)
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None
    task: Optional[asyncio.Task] = None
    artifacts: Optional[RunArtifacts] = None
    error: Optional[str] = None
    finished: asyncio.Event = field(default_factory=asyncio.Event)


class ExperimentQueue:
    """
    Executes training runs in worker threads, at most ``max_concurrent_runs`` at a time.

    Runs are identified by the hash of their resolved config, so resubmitting an
    identical config while it is queued or running is detected as a duplicate.
    """

    def __init__(self, max_concurrent_runs: int = 2):
        self.max_concurrent_runs = max_concurrent_runs
        self.semaphore = asyncio.Semaphore(max_concurrent_runs)
        self.queue: asyncio.Queue[QueuedRun] = asyncio.Queue()
        self.running_runs: Dict[str, QueuedRun] = {}
        self.queued_runs: Dict[str, QueuedRun] = {}
        self.completed_runs: Dict[str, QueuedRun] = {}
        self._processor: Optional[asyncio.Task] = None

    async def enqueue(self, config: ExperimentConfig, runner: Runner = run_experiment) -> QueuedRun:
        """
        Add a run to the queue.

        Args:
            config: Resolved experiment config
            runner: Blocking function executing the run; called in a worker thread
        """
        queued = QueuedRun(config=config, run_id=config.config_hash())
        self.queued_runs[queued.run_id] = queued
        await self.queue.put(queued)

        if self._processor is None or self._processor.done():
            self._processor = asyncio.create_task(self._process_queue(runner))
        return queued

    def is_duplicate(self, config: ExperimentConfig) -> bool:
        run_id = config.config_hash()
        return run_id in self.running_runs or run_id in self.queued_runs

    def get_duplicate_info(self, config: ExperimentConfig) -> Optional[Dict[str, Any]]:
        run_id = config.config_hash()
        existing = self.running_runs.get(run_id) or self.queued_runs.get(run_id)
        if existing is None:
            return None
        return {
            "run_id": run_id,
            "status": existing.status.value,
            "output_dir": existing.config.output_dir,
            "queued_at": existing.queued_at.isoformat(),
            "started_at": existing.started_at.isoformat() if existing.started_at else None,
        }

    def get_queue_status(self) -> Dict[str, Any]:
        return {
            "max_concurrent_runs": self.max_concurrent_runs,
            "currently_running": len(self.running_runs),
            "queued": self.queue.qsize(),
            "recently_completed": len(self.completed_runs),
        }

    def get_running_runs(self) -> Dict[str, Dict[str, Any]]:
        return {
            run_id: {
                "env": run.config.env.id,
                "algo": run.config.algo,
                "seed": run.config.seed,
                "output_dir": run.config.output_dir,
                "status": run.status.value,
                "started_at": run.started_at.isoformat() if run.started_at else None,
            }
            for run_id, run in self.running_runs.items()
        }

    async def wait(self, runs: Sequence[QueuedRun]) -> List[QueuedRun]:
        """Block until every run in ``runs`` has completed or failed."""
        for run in runs:
            await run.finished.wait()
        return list(runs)

    async def _process_queue(self, runner: Runner) -> None:
        while True:
            queued = None
            try:
                queued = await self.queue.get()
                await self.semaphore.acquire()

                queued.status = RunStatus.RUNNING
                queued.started_at = datetime.now()
                self.running_runs[queued.run_id] = queued
                self.queued_runs.pop(queued.run_id, None)
                queued.task = asyncio.create_task(self._run_with_cleanup(queued, runner))
            except asyncio.CancelledError:
                break
            except Exception as e:
                logger.exception("Could not start run")
                if queued:
                    queued.status = RunStatus.FAILED
                    queued.error = str(e)
                    queued.completed_at = datetime.now()
                    self.queued_runs.pop(queued.run_id, None)
                    queued.finished.set()
                if self.semaphore.locked():
                    self.semaphore.release()

    async def _run_with_cleanup(self, queued: QueuedRun, runner: Runner) -> None:
        try:
            queued.artifacts = await asyncio.to_thread(runner, queued.config)
            queued.status = RunStatus.COMPLETED
            logger.info("Run %s finished (%s)", queued.run_id, queued.config.output_dir)
        except Exception as e:
            queued.status = RunStatus.FAILED
            queued.error = f"{type(e).__name__}: {e}"
            logger.error("Run %s failed: %s", queued.run_id, queued.error)
        finally:
            queued.completed_at = datetime.now()
            self.running_runs.pop(queued.run_id, None)
            self.completed_runs[queued.run_id] = queued
            if len(self.completed_runs) > COMPLETED_HISTORY:
                oldest_id = min(
                    self.completed_runs,
                    key=lambda k: self.completed_runs[k].completed_at or datetime.min,
                )
                self.completed_runs.pop(oldest_id, None)
            queued.finished.set()
            self.semaphore.release()
            self.queue.task_done()


def _slug(value: Any) -> str:
    return re.sub(r"[^A-Za-z0-9.+-]+", "_", str(value))


def sweep_configs(
    base: ExperimentConfig,
    parameter: str,
    values: Sequence[Any],
    seeds: Sequence[int],
    out_dir: Path,
) -> Dict[Any, List[ExperimentConfig]]:
    """One resolved config per (value, seed), written under ``out_dir/<parameter>_<value>/seed_<seed>``."""
    leaf = parameter.split(".")[-1]
    configs: Dict[Any, List[ExperimentConfig]] = {}
    for value in values:
        for seed in seeds:
            document = base.model_dump(mode="json")
            node = document
            keys = parameter.split(".")
            for key in keys[:-1]:
                node = node[key]
            node[keys[-1]] = value
            document["seed"] = seed
            document["output_dir"] = str(out_dir / f"{leaf}_{_slug(value)}" / f"seed_{seed}")
            configs.setdefault(value, []).append(validate_config(document))
    return configs


def check_duplicates(queue: ExperimentQueue, configs: Sequence[ExperimentConfig]) -> None:
    """
    Reject a batch of configs if any would duplicate a queued or running run.

    Raises:
        DuplicateRunError: A config matches a queued or running run, or repeats within the batch
    """
    seen: Dict[str, ExperimentConfig] = {}
    for config in configs:
        if queue.is_duplicate(config):
            raise DuplicateRunError(
                "A run with an identical configuration is already running or queued.",
                queue.get_duplicate_info(config),
            )
        run_id = config.config_hash()
        if run_id in seen:
            raise DuplicateRunError(
                "The sweep contains the same configuration twice.",
                {"run_id": run_id, "status": "submitted", "output_dir": seen[run_id].output_dir},
            )
        seen[run_id] = config


async def run_sweep(
    queue: ExperimentQueue,
    base: ExperimentConfig,
    parameter: str,
    values: Sequence[Any],
    seeds: Sequence[int],
    out_dir: Path,
    runner: Runner = run_experiment,
) -> Dict[Any, Path]:
    """
    Run ``parameter`` over ``values`` for every seed and emit one curve table per value.

    Returns:
        Curve-table path per value; values whose runs all failed are left out

    Raises:
        DuplicateRunError: Before anything is queued, if a sweep run duplicates another run
    """
    out_dir = Path(out_dir)
    configs = sweep_configs(base, parameter, values, seeds, out_dir)
    check_duplicates(queue, [config for group in configs.values() for config in group])
    submitted = {}
    for value, group in configs.items():
        submitted[value] = [await queue.enqueue(config, runner) for config in group]
    leaf = parameter.split(".")[-1]
    tables: Dict[Any, Path] = {}
    for value, runs in submitted.items():
        await queue.wait(runs)
        metrics = [
            Path(run.config.output_dir) / METRICS_FILENAME
            for run in runs
            if run.status is RunStatus.COMPLETED
        ]
        if not metrics:
            logger.warning("Every run of %s=%s failed; no curve table", parameter, value)
            continue
        tables[value] = out_dir / f"curves_{leaf}_{_slug(value)}.csv"
        emit_curve_data(metrics, tables[value])
    return tables
