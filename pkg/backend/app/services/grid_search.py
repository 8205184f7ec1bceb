"""Grid search over architecture and training hyperparameters.

Every Cartesian combination becomes an independent job with its own derived seed.
Jobs run inline or in a process pool; the parent process is the only writer to
the run registry, and the ranking is computed from the registry once all jobs
are done, so the result does not depend on completion order.
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import pandas as pd
from app.config import expand
from app.core.rng import derive_seed
from app.models import Sweep, SweepJob
from app.services.architectures import ModelSpec
from app.services.dataset import Dataset
from app.services.manifest import RunManifest
from app.services.training import TrainingConfig, train
from sqlalchemy.orm import Session, sessionmaker

logger = logging.getLogger(__name__)

RANKED_COLUMNS = [
    "rank",
    "job",
    "arch",
    "strategy",
    "seed",
    "status",
    "val_nrmse",
    "val_loss",
    "best_epoch",
    "epochs_run",
    "model_params",
    "training_params",
    "error",
]


@dataclass(frozen=True)
class GridJob:
    index: int
    seed: int
    model_params: Dict[str, Any]
    training_params: Dict[str, Any]

    @property
    def arch(self) -> str:
        return self.model_params["kind"]


@dataclass
class JobOutcome:
    index: int
    arch: str
    strategy: str
    seed: int
    model_params: Dict[str, Any]
    training_params: Dict[str, Any]
    status: str
    val_nrmse: Optional[float] = None
    val_loss: Optional[float] = None
    best_epoch: Optional[int] = None
    epochs_run: Optional[int] = None
    checkpoint_path: Optional[str] = None
    error: Optional[str] = None
    seconds: float = 0.0


@dataclass
class GridSearchResult:
    sweep_id: Optional[int]
    ranked: List[JobOutcome] = field(default_factory=list)

    @property
    def failures(self) -> List[JobOutcome]:
        return [outcome for outcome in self.ranked if outcome.status != "ok"]

    def best(self, strategy: Optional[str] = None) -> Optional[JobOutcome]:
        for outcome in self.ranked:
            if outcome.status == "ok" and strategy in (None, outcome.strategy):
                return outcome
        return None

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for rank, outcome in enumerate(self.ranked, start=1):
            rows.append(
                {
                    "rank": rank,
                    "job": outcome.index,
                    "arch": outcome.arch,
                    "strategy": outcome.strategy,
                    "seed": outcome.seed,
                    "status": outcome.status,
                    "val_nrmse": outcome.val_nrmse,
                    "val_loss": outcome.val_loss,
                    "best_epoch": outcome.best_epoch,
                    "epochs_run": outcome.epochs_run,
                    "model_params": json.dumps(outcome.model_params, sort_keys=True),
                    "training_params": json.dumps(outcome.training_params, sort_keys=True),
                    "error": outcome.error,
                }
            )
        return pd.DataFrame(rows, columns=RANKED_COLUMNS)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.6f")
        return path


def build_jobs(
    spec_grid: Mapping[str, List[Any]],
    config_grid: Mapping[str, List[Any]],
    base_seed: int = 0,
    base_model: Optional[Mapping[str, Any]] = None,
    base_training: Optional[Mapping[str, Any]] = None,
) -> List[GridJob]:
    """One job per combination of the two grids; strategies sweep independently."""
    for name, grid in (("model", spec_grid), ("training", config_grid)):
        empty = [key for key, options in grid.items() if not options]
        if empty:
            raise ValueError(f"empty {name} grid for {empty}")
    if "kind" not in spec_grid:
        raise ValueError("the model grid must list at least one architecture under 'kind'")

    jobs = []
    for model_values in expand(spec_grid):
        for training_values in expand(config_grid):
            index = len(jobs)
            jobs.append(
                GridJob(
                    index=index,
                    seed=derive_seed(base_seed, index),
                    model_params={**(base_model or {}), **model_values},
                    training_params={**(base_training or {}), **training_values},
                )
            )
    return jobs


def run_job(
    job: GridJob,
    dataset: Dataset,
    budget: int,
    job_dir: Optional[str] = None,
) -> JobOutcome:
    """
    Train one grid point; any failure is captured in the outcome.

    Args:
        job: Grid point with its derived seed
        dataset: Training data (validation is split off inside ``train``)
        budget: Epoch budget of the job
        job_dir: Directory for the checkpoint, record and job manifest

    Returns:
        Outcome with status ``ok`` or ``failed``
    """
    started = time.perf_counter()
    strategy = str(job.training_params.get("strategy", TrainingConfig().strategy))
    outcome = JobOutcome(
        index=job.index,
        arch=job.arch,
        strategy=strategy,
        seed=job.seed,
        model_params=dict(job.model_params),
        training_params=dict(job.training_params),
        status="failed",
    )
    try:
        spec = ModelSpec.model_validate(
            {
                **job.model_params,
                "input_dim": dataset.input_dim,
                "output_dim": dataset.output_dim,
            }
        )
        config = TrainingConfig.model_validate(
            {
                **job.training_params,
                "seed": job.seed,
                "max_epochs": budget,
                "track_val_nrmse": True,
            }
        )
        result = train(spec, dataset, config)
        record = result.record
        best = record.epochs[record.best_epoch - 1]
        outcome.status = "ok"
        outcome.val_nrmse = best.val_nrmse
        outcome.val_loss = best.val_loss
        outcome.best_epoch = record.best_epoch
        outcome.epochs_run = len(record.epochs)
        if job_dir:
            directory = Path(job_dir)
            checkpoint = result.model.save(
                directory / "checkpoint.npz", {"job": job.index, "seed": job.seed}
            )
            record.write_csv(directory / "record.csv")
            outcome.checkpoint_path = str(checkpoint)
    except Exception as e:
        logger.error(f"Grid job {job.index} ({job.arch}) failed: {e}", exc_info=True)
        outcome.error = f"{type(e).__name__}: {e}"
    outcome.seconds = time.perf_counter() - started

    if job_dir:
        RunManifest(
            command="gridsearch-job",
            argv=[],
            config={"model": job.model_params, "training": job.training_params},
            seed=job.seed,
            artifacts=(
                {"checkpoint": outcome.checkpoint_path} if outcome.checkpoint_path else {}
            ),
        ).finish(outcome.status).write(job_dir, "job.yaml")
    return outcome


def _record(db: Session, sweep: Sweep, outcome: JobOutcome) -> None:
    db.add(
        SweepJob(
            sweep_id=sweep.id,
            job_index=outcome.index,
            arch=outcome.arch,
            strategy=outcome.strategy,
            seed=outcome.seed,
            model_params=json.dumps(outcome.model_params, sort_keys=True),
            training_params=json.dumps(outcome.training_params, sort_keys=True),
            status=outcome.status,
            val_nrmse=outcome.val_nrmse,
            val_loss=outcome.val_loss,
            best_epoch=outcome.best_epoch,
            epochs_run=outcome.epochs_run,
            checkpoint_path=outcome.checkpoint_path,
            error=outcome.error,
            seconds=outcome.seconds,
        )
    )
    db.commit()


def _from_row(row: SweepJob) -> JobOutcome:
    return JobOutcome(
        index=row.job_index,
        arch=row.arch,
        strategy=row.strategy,
        seed=row.seed,
        model_params=json.loads(row.model_params),
        training_params=json.loads(row.training_params),
        status=row.status,
        val_nrmse=row.val_nrmse,
        val_loss=row.val_loss,
        best_epoch=row.best_epoch,
        epochs_run=row.epochs_run,
        checkpoint_path=row.checkpoint_path,
        error=row.error,
        seconds=row.seconds or 0.0,
    )


def rank_outcomes(outcomes: Sequence[JobOutcome]) -> List[JobOutcome]:
    """Ascending validation NRMSE; failed or unscored jobs last; ties by job index."""

    def key(outcome: JobOutcome):
        scored = outcome.status == "ok" and outcome.val_nrmse is not None
        return (0 if scored else 1, outcome.val_nrmse if scored else 0.0, outcome.index)

    return sorted(outcomes, key=key)


def ranked_from_registry(db: Session, sweep_id: int) -> List[JobOutcome]:
    rows = db.query(SweepJob).filter(SweepJob.sweep_id == sweep_id).all()
    return rank_outcomes([_from_row(row) for row in rows])


def grid_search(
    spec_grid: Mapping[str, List[Any]],
    config_grid: Mapping[str, List[Any]],
    dataset: Dataset,
    budget: int,
    *,
    base_seed: int = 0,
    base_model: Optional[Mapping[str, Any]] = None,
    base_training: Optional[Mapping[str, Any]] = None,
    jobs: int = 1,
    output_dir: Optional[Path] = None,
    session_factory: Optional[sessionmaker] = None,
    name: str = "sweep",
    dataset_label: str = "",
) -> GridSearchResult:
    """
    Train every grid combination and rank the results by validation NRMSE.

    Args:
        spec_grid: ModelSpec field -> values; must include ``kind``
        config_grid: TrainingConfig field -> values (may be empty)
        dataset: Training dataset shared read-only by all jobs
        budget: Epoch budget per job
        base_seed: Seed from which every job seed is derived
        jobs: Worker processes; 1 runs inline
        output_dir: Where per-job artifacts go (``job_XXXX/``)
        session_factory: Run registry; when given, the ranking is read back from it
        name: Sweep name stored in the registry
        dataset_label: Dataset description stored in the registry

    Returns:
        Ranked outcomes, failed jobs included
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    grid_jobs = build_jobs(spec_grid, config_grid, base_seed, base_model, base_training)
    logger.info(f"Grid search '{name}': {len(grid_jobs)} jobs, {jobs} worker(s)")

    def job_dir(job: GridJob) -> Optional[str]:
        return str(Path(output_dir) / f"job_{job.index:04d}") if output_dir else None

    db: Optional[Session] = session_factory() if session_factory else None
    sweep = None
    try:
        if db is not None:
            sweep = Sweep(
                name=name, dataset=dataset_label, base_seed=base_seed, budget=budget
            )
            db.add(sweep)
            db.commit()

        outcomes: List[JobOutcome] = []

        def collect(outcome: JobOutcome) -> None:
            outcomes.append(outcome)
            if db is not None:
                _record(db, sweep, outcome)
            logger.info(
                f"Job {outcome.index} {outcome.arch}/{outcome.strategy}: "
                f"{outcome.status}, val NRMSE {outcome.val_nrmse}"
            )

        if jobs <= 1:
            for job in grid_jobs:
                collect(run_job(job, dataset, budget, job_dir(job)))
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {
                    pool.submit(run_job, job, dataset, budget, job_dir(job)): job
                    for job in grid_jobs
                }
                for future in as_completed(futures):
                    job = futures[future]
                    try:
                        collect(future.result())
                    except Exception as e:
                        logger.error(f"Worker for job {job.index} crashed: {e}", exc_info=True)
                        collect(
                            JobOutcome(
                                index=job.index,
                                arch=job.arch,
                                strategy=str(job.training_params.get("strategy", "parallel")),
                                seed=job.seed,
                                model_params=dict(job.model_params),
                                training_params=dict(job.training_params),
                                status="failed",
                                error=f"{type(e).__name__}: {e}",
                            )
                        )

        if db is not None:
            failed = sum(1 for outcome in outcomes if outcome.status != "ok")
            sweep.status = "completed" if not failed else "completed_with_failures"
            sweep.finished_at = datetime.now(timezone.utc)
            db.commit()
            ranked = ranked_from_registry(db, sweep.id)
            return GridSearchResult(sweep.id, ranked)
        return GridSearchResult(None, rank_outcomes(outcomes))
    finally:
        if db is not None:
            db.close()
