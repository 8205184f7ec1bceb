"""Tests for grid expansion, job isolation, ranking and the sweep registry."""

import pytest
from app.core.rng import derive_seed
from app.models import Sweep, SweepJob
from app.services.architectures import ModelSpec
from app.services.grid_search import (
    JobOutcome,
    build_jobs,
    grid_search,
    rank_outcomes,
)
from app.services.training import TrainingConfig, train

BASE_MODEL = {"window_length": 3, "hidden_sizes": [3]}
BASE_TRAINING = {"warmup_steps": 3, "unroll_length": 8, "batch_size": 8}


def _outcome(index, status="ok", val_nrmse=None):
    return JobOutcome(
        index=index,
        arch="rnn",
        strategy="parallel",
        seed=index,
        model_params={"kind": "rnn"},
        training_params={},
        status=status,
        val_nrmse=val_nrmse,
    )


def test_build_jobs_expands_the_product():
    """Two learning rates times two widths give four jobs with distinct seeds."""
    jobs = build_jobs(
        {"kind": ["rnn"], "hidden_sizes": [[3], [4]]},
        {"learning_rate": [1e-3, 1e-2]},
        base_seed=7,
    )
    assert len(jobs) == 4
    assert [job.seed for job in jobs] == [derive_seed(7, i) for i in range(4)]
    assert len({job.seed for job in jobs}) == 4
    assert jobs[1].model_params == {"kind": "rnn", "hidden_sizes": [3]}
    assert jobs[1].training_params == {"learning_rate": 1e-2}


def test_build_jobs_rejects_bad_grids():
    with pytest.raises(ValueError):
        build_jobs({"kind": ["rnn"], "hidden_sizes": []}, {})
    with pytest.raises(ValueError):
        build_jobs({"hidden_sizes": [[3]]}, {})


def test_rank_outcomes_orders_by_nrmse_with_failures_last():
    """Lower NRMSE first, ties by job index, failed and unscored jobs at the end."""
    ranked = rank_outcomes(
        [
            _outcome(0, val_nrmse=0.5),
            _outcome(1, status="failed"),
            _outcome(2, val_nrmse=0.2),
            _outcome(3, val_nrmse=0.5),
            _outcome(4, val_nrmse=None),
        ]
    )
    assert [o.index for o in ranked] == [2, 0, 3, 1, 4]


def test_single_point_grid_matches_train(linear_benchmark):
    """A 1x1 grid reproduces one train() call with the derived seed."""
    train_set, _ = linear_benchmark
    result = grid_search(
        {"kind": ["gru"]},
        {},
        train_set,
        budget=2,
        base_seed=3,
        base_model=BASE_MODEL,
        base_training=BASE_TRAINING,
    )
    (outcome,) = result.ranked
    assert outcome.status == "ok"

    spec = ModelSpec(kind="gru", input_dim=1, output_dim=1, **BASE_MODEL)
    config = TrainingConfig(**BASE_TRAINING, seed=derive_seed(3, 0), max_epochs=2)
    direct = train(spec, train_set, config)
    best = direct.record.epochs[direct.record.best_epoch - 1]
    assert outcome.val_nrmse == best.val_nrmse
    assert outcome.epochs_run == len(direct.record.epochs)


def test_two_by_two_grid_ranks_four_entries(linear_benchmark, tmp_path):
    """Every combination is trained, ranked and leaves artifacts behind."""
    train_set, _ = linear_benchmark
    result = grid_search(
        {"kind": ["rnn"], "hidden_sizes": [[2], [4]]},
        {"learning_rate": [1e-3, 1e-2]},
        train_set,
        budget=2,
        base_training=BASE_TRAINING,
        output_dir=tmp_path,
    )
    frame = result.to_frame()
    assert len(frame) == 4
    assert frame["rank"].tolist() == [1, 2, 3, 4]
    scores = frame["val_nrmse"].tolist()
    assert scores == sorted(scores)
    for index in range(4):
        job_dir = tmp_path / f"job_{index:04d}"
        assert (job_dir / "checkpoint.npz").exists()
        assert (job_dir / "record.csv").exists()
        assert (job_dir / "job.yaml").exists()
    written = result.write_csv(tmp_path / "ranked.csv")
    assert written.read_text().startswith("rank,job,arch,strategy")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_job_is_marked_failed(linear_benchmark, tmp_path):
    """The sweep keeps going and lists the diverged job as failed."""
    train_set, _ = linear_benchmark
    result = grid_search(
        {"kind": ["mlp"], "activation": ["identity"]},
        {"learning_rate": [1e-3, 1e6]},
        train_set,
        budget=3,
        base_model={"window_length": 2, "hidden_sizes": [4]},
        base_training={**BASE_TRAINING, "unroll_length": 20, "clip_norm": None},
        output_dir=tmp_path,
    )
    assert [o.status for o in result.ranked] == ["ok", "failed"]
    failed = result.failures[0]
    assert failed.index == 1
    assert "TrainingDivergedError" in failed.error
    assert result.best().index == 0
    assert (tmp_path / "job_0001" / "job.yaml").exists()


def test_invalid_job_config_does_not_abort_sweep(linear_benchmark):
    """A segment longer than the trajectories fails only that job."""
    train_set, _ = linear_benchmark
    result = grid_search(
        {"kind": ["rnn"]},
        {"unroll_length": [5, 500]},
        train_set,
        budget=1,
        base_model=BASE_MODEL,
        base_training={"warmup_steps": 3},
    )
    statuses = {o.index: o.status for o in result.ranked}
    assert statuses == {0: "ok", 1: "failed"}
    assert "TrajectoryTooShortError" in result.failures[0].error


def test_parallel_jobs_give_the_same_ranking(linear_benchmark):
    """--jobs 1 and --jobs 2 rank identically."""
    train_set, _ = linear_benchmark
    kwargs = dict(
        spec_grid={"kind": ["rnn", "mlp"]},
        config_grid={"strategy": ["series_parallel", "parallel"]},
        dataset=train_set,
        budget=1,
        base_model=BASE_MODEL,
        base_training=BASE_TRAINING,
    )
    serial = grid_search(**kwargs, jobs=1).to_frame()
    pooled = grid_search(**kwargs, jobs=2).to_frame()
    assert serial.equals(pooled)


def test_outcomes_are_recorded_in_the_registry(linear_benchmark, session_factory):
    """The sweep and one row per job end up in the database."""
    train_set, _ = linear_benchmark
    result = grid_search(
        {"kind": ["lstm"]},
        {"learning_rate": [1e-3, 3e-3]},
        train_set,
        budget=1,
        base_model=BASE_MODEL,
        base_training=BASE_TRAINING,
        session_factory=session_factory,
        name="lstm-lr",
        dataset_label="linear1",
    )
    db = session_factory()
    try:
        sweep = db.query(Sweep).filter(Sweep.id == result.sweep_id).one()
        assert sweep.name == "lstm-lr"
        assert sweep.status == "completed"
        assert sweep.finished_at is not None
        rows = db.query(SweepJob).filter(SweepJob.sweep_id == sweep.id).all()
        assert sorted(row.job_index for row in rows) == [0, 1]
        assert [job.job_index for job in sweep.jobs] == [0, 1]
    finally:
        db.close()
    assert [o.index for o in result.ranked] == [
        o.index for o in rank_outcomes(result.ranked)
    ]


def test_budget_must_be_positive(linear_benchmark):
    train_set, _ = linear_benchmark
    with pytest.raises(ValueError):
        grid_search({"kind": ["rnn"]}, {}, train_set, budget=0)
