"""Tests for the strategy comparison report."""

import pandas as pd
import pytest
from app.services.comparison import ComparisonReport, run_comparison
from app.services.plants import make_synthetic_benchmark
from app.services.simulation import REPORT_COLUMNS

SMALL_ARCHS = {
    "rnn": {"hidden_sizes": [3]},
    "mlp": {"hidden_sizes": [4], "window_length": 3},
}
SMALL_TRAINING = {"warmup_steps": 3, "unroll_length": 8, "segment_stride": 8, "batch_size": 8}


def _report() -> ComparisonReport:
    runs = []
    for seed, (sp, par) in enumerate([(0.9, 0.4), (0.5, 0.6), (0.8, 0.3)]):
        runs.append({"dataset": "d", "arch": "rnn", "strategy": "series_parallel", "seed": seed, "nrmse": sp, "best_epoch": 1})
        runs.append({"dataset": "d", "arch": "rnn", "strategy": "parallel", "seed": seed, "nrmse": par, "best_epoch": 1})
    return ComparisonReport("d", runs)


def test_single_arch_gives_one_row_per_strategy(valve_benchmark):
    """--archs rnn yields a parallel and a series-parallel NRMSE."""
    train_set, test_set = valve_benchmark
    report = run_comparison(
        train_set,
        test_set,
        ["rnn"],
        budget=2,
        arch_settings=SMALL_ARCHS,
        training_settings=SMALL_TRAINING,
        dataset_label="valve",
    )
    summary = report.summary()
    assert list(summary.columns) == REPORT_COLUMNS
    assert sorted(summary["strategy"]) == ["parallel", "series_parallel"]
    assert summary["nrmse"].notna().all()

    matrix = report.matrix()
    assert list(matrix.columns) == ["arch", "series_parallel", "parallel", "winner"]
    assert matrix["winner"].iloc[0] in {"parallel", "series_parallel", "tie"}


def test_comparison_is_deterministic(valve_benchmark):
    train_set, test_set = valve_benchmark
    kwargs = dict(
        archs=["mlp"], budget=1, arch_settings=SMALL_ARCHS, training_settings=SMALL_TRAINING
    )
    first = run_comparison(train_set, test_set, **kwargs).runs_frame()
    second = run_comparison(train_set, test_set, **kwargs).runs_frame()
    pd.testing.assert_frame_equal(first, second)


def test_feedforward_warmup_is_raised_to_the_window(valve_benchmark):
    """MLP runs succeed when the shared warmup is shorter than L."""
    train_set, test_set = valve_benchmark
    report = run_comparison(
        train_set,
        test_set,
        ["mlp"],
        budget=1,
        strategies=["parallel"],
        arch_settings={"mlp": {"hidden_sizes": [4], "window_length": 5}},
        training_settings=SMALL_TRAINING,
    )
    assert len(report.runs) == 1


def test_median_summary_and_wins():
    """Medians per strategy; two of three seeds won by parallel."""
    report = _report()
    summary = report.summary().set_index("strategy")["nrmse"]
    assert summary["series_parallel"] == pytest.approx(0.8)
    assert summary["parallel"] == pytest.approx(0.4)
    assert report.parallel_wins() == {"parallel_wins": 2, "comparisons": 3}
    assert report.matrix()["winner"].tolist() == ["parallel"]


def test_write_emits_report_matrix_and_reference(tmp_path):
    paths = _report().write(tmp_path)
    assert set(paths) == {"report", "runs", "matrix", "reference"}
    for path in paths.values():
        assert path.exists()
    header = paths["report"].read_text().splitlines()[0]
    assert header == ",".join(REPORT_COLUMNS)


@pytest.mark.slow
def test_parallel_training_wins_on_the_valve_plant():
    """Desk-scale benchmark: parallel beats series-parallel in at least 8 of 9 runs."""
    train_set, test_set = make_synthetic_benchmark("valve", seed=0)
    report = run_comparison(
        train_set, test_set, ["rnn", "gru", "mlp"], seeds=(0, 1, 2), budget=30, dataset_label="valve"
    )
    wins = report.parallel_wins()
    assert wins["comparisons"] == 9
    assert wins["parallel_wins"] >= 8
