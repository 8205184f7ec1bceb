"""Tests for free-running simulation, NRMSE and the evaluators."""

from types import SimpleNamespace

import numpy as np
import pytest
from app.core.autodiff import DimensionError
from app.core.rng import make_rng
from app.services.architectures import ModelParams, ModelSpec, init_params
from app.services.dataset import Dataset, NormalizationStats, Trajectory
from app.services.simulation import (
    REPORT_COLUMNS,
    DegenerateChannelError,
    PrefixTooShortError,
    SimulationModel,
    evaluate,
    evaluate_concatenated,
    evaluate_per_trajectory,
    free_run,
    load_reference_results,
    nrmse,
    nrmse_per_channel,
    simulate_trajectory,
    write_report,
)

IDENTITY = NormalizationStats(np.zeros(1), np.ones(1), np.zeros(1), np.ones(1))


def _linear_model(a: float, b: float, normalizer=IDENTITY, warmup: int = 1) -> SimulationModel:
    spec = ModelSpec(
        kind="mlp", input_dim=1, output_dim=1, window_length=1, hidden_sizes=[], activation="identity"
    )
    params = ModelParams({"dense0.weight": np.array([[a, b]]), "dense0.bias": np.zeros(1)})
    return SimulationModel(spec, params, normalizer, warmup)


def _random_model(kind: str, seed: int = 0) -> SimulationModel:
    extra = {"tcn_dilations": [1]} if kind == "tcn" else {}
    spec = ModelSpec(
        kind=kind, input_dim=1, output_dim=1, window_length=3, hidden_sizes=[4], **extra
    )
    normalizer = NormalizationStats(
        np.array([0.1]), np.array([0.7]), np.array([-0.2]), np.array([1.3])
    )
    return SimulationModel(spec, init_params(spec, make_rng(seed)), normalizer, 3)


def _dataset(*trajectories: Trajectory) -> Dataset:
    return Dataset(tuple(trajectories), "test", ("u",), ("y",))


def _traj(traj_id: str, n: int, seed: int) -> Trajectory:
    rng = make_rng(seed)
    return Trajectory(traj_id, 0.1, rng.normal(size=n), np.cumsum(rng.normal(size=n)))


def test_nrmse_examples():
    """Perfect prediction gives 0; y=[0,2] against 1 gives 1."""
    y = np.array([0.0, 2.0])
    assert nrmse(y, y) == 0.0
    assert nrmse(y, np.array([1.0, 1.0])) == pytest.approx(1.0)


def test_mean_predictor_scores_one(rng):
    for _ in range(10):
        y = rng.normal(size=50) * rng.uniform(0.1, 10)
        assert nrmse(y, np.full_like(y, y.mean())) == pytest.approx(1.0, abs=1e-12)


def test_nrmse_sums_channels_and_averages_samples():
    """Two channels each at 1 combine to sqrt(2)."""
    y = np.array([[0.0, 10.0], [2.0, 14.0]])
    y_hat = np.array([[1.0, 12.0], [1.0, 12.0]])
    assert nrmse_per_channel(y, y_hat).tolist() == pytest.approx([1.0, 1.0])
    assert nrmse(y, y_hat) == pytest.approx(np.sqrt(2.0))


def test_nrmse_is_affine_invariant(rng):
    """Scaling and shifting both series per channel leaves NRMSE unchanged."""
    y = rng.normal(size=(80, 3))
    y_hat = y + rng.normal(scale=0.3, size=y.shape)
    scale = np.array([-2.5, 1e3, 0.01])
    shift = np.array([4.0, -7.0, 100.0])
    assert nrmse(scale * y + shift, scale * y_hat + shift) == pytest.approx(
        nrmse(y, y_hat), abs=1e-10
    )


def test_nrmse_degenerate_channel_is_named():
    """A constant measured channel raises with its name and trajectory."""
    y = np.column_stack([np.arange(5.0), np.full(5, 3.0)])
    with pytest.raises(DegenerateChannelError) as excinfo:
        nrmse(y, y, ["p", "s"], "run7")
    assert excinfo.value.channel == "s"
    assert excinfo.value.trajectory_id == "run7"


@pytest.mark.parametrize("level", [0.1, 0.7, 1e6 / 3])
def test_nrmse_rejects_non_dyadic_constants(level):
    """Rounding leaves np.std of a constant slightly above 0; it still counts as constant."""
    with pytest.raises(DegenerateChannelError):
        nrmse(np.full(3, level), [level, level + 0.1, level - 0.1])


def test_nrmse_shape_checks():
    with pytest.raises(DimensionError):
        nrmse(np.zeros((4, 1)), np.zeros((4, 2)))
    with pytest.raises(ValueError):
        nrmse(np.array([1.0]), np.array([1.0]))


def test_nrmse_maps_overflow_to_inf():
    """Runaway simulations score inf instead of NaN."""
    y = np.array([0.0, 1.0, 2.0])
    assert nrmse(y, np.array([0.0, 1e308, -1e308])) == np.inf


def test_free_run_zero_net_with_skip_holds_last_value():
    """ŷ stays at the last prefix y."""
    spec = ModelSpec(kind="mlp", input_dim=1, output_dim=1, window_length=2, skip_connection=True)
    params = init_params(spec, make_rng(0))
    params = ModelParams({name: np.zeros_like(value) for name, value in params.items()})
    model = SimulationModel(spec, params, IDENTITY, 2)
    predicted = free_run(model, np.array([[0.4], [1.7]]), np.linspace(-1, 1, 12))
    assert predicted.shape == (10, 1)
    assert np.all(predicted == 1.7)


def test_free_run_matches_linear_recursion(rng):
    """An exact linear model reproduces the plant over 100 steps."""
    a, b = 0.95, 0.3
    u = rng.uniform(-1, 1, 101)
    y = np.zeros(101)
    y[0] = 0.5
    for k in range(100):
        y[k + 1] = a * y[k] + b * u[k]
    predicted = free_run(_linear_model(a, b), y[:1], u)
    assert np.max(np.abs(predicted[:, 0] - y[1:])) < 1e-8


def test_free_run_respects_normalization(rng):
    """Predictions are returned in physical units."""
    a, b = 0.9, 0.2
    stats = NormalizationStats(np.array([2.0]), np.array([3.0]), np.array([-1.0]), np.array([0.5]))
    model = _linear_model(a, b, stats)
    u = rng.uniform(-1, 1, 30)
    predicted = free_run(model, np.array([[0.0]]), u)
    z = stats.normalize_outputs(np.array([0.0]))[0]
    un = stats.normalize_inputs(u[:, None])[:, 0]
    expected = []
    for k in range(29):
        z = a * z + b * un[k]
        expected.append(z)
    assert np.allclose(predicted[:, 0], stats.denormalize_outputs(np.array(expected)), atol=1e-12)


@pytest.mark.parametrize("kind", ["mlp", "gru", "tcn"])
def test_free_run_is_causal(kind, rng):
    """Changing inputs from step m on leaves earlier predictions untouched."""
    model = _random_model(kind)
    prefix = rng.normal(size=(3, 1))
    u = rng.normal(size=(40, 1))
    base = free_run(model, prefix, u)
    changed_inputs = u.copy()
    changed_inputs[20:] += 5.0
    changed = free_run(model, prefix, changed_inputs)
    # prediction i is y_{3+i}, which reads inputs up to 2+i
    assert np.array_equal(base[:18], changed[:18])
    assert not np.array_equal(base[18:], changed[18:])


def test_simulation_reads_no_measured_output_after_prefix():
    """Overwriting measured outputs beyond the prefix changes nothing predicted."""
    model = _random_model("lstm")
    traj = _traj("a", 30, 1)
    tampered = Trajectory("a", 0.1, traj.inputs, np.concatenate([traj.outputs[:3], np.full((27, 1), 1e6)]))
    assert np.array_equal(
        simulate_trajectory(model, traj).predicted, simulate_trajectory(model, tampered).predicted
    )


def test_prefix_too_short():
    """Feedforward models need L prefix samples."""
    model = _random_model("mlp")
    with pytest.raises(PrefixTooShortError) as excinfo:
        free_run(model, np.zeros((2, 1)), np.zeros(10))
    assert excinfo.value.required == 3
    with pytest.raises(PrefixTooShortError):
        simulate_trajectory(model, _traj("short", 4, 0))


def test_model_rejects_warmup_below_window():
    spec = ModelSpec(kind="tcn", input_dim=1, output_dim=1, window_length=4, hidden_sizes=[2], tcn_dilations=[1])
    with pytest.raises(PrefixTooShortError):
        SimulationModel(spec, init_params(spec, make_rng(0)), IDENTITY, 2)


def test_untrained_model_scores_finite_nrmse():
    model = _random_model("rnn", seed=4)
    summary = evaluate_per_trajectory(model, _dataset(_traj("a", 50, 2), _traj("b", 50, 3)))
    assert np.isfinite(summary.nrmse)
    assert set(summary.per_trajectory) == {"a", "b"}
    assert summary.horizon == 2 * 47


def test_evaluators_agree_on_single_trajectory():
    """Per-trajectory and concatenated modes coincide for one trajectory."""
    model = _random_model("gru", seed=2)
    dataset = _dataset(_traj("only", 60, 5))
    per = evaluate_per_trajectory(model, dataset)
    joined = evaluate_concatenated(model, dataset)
    assert per.nrmse == pytest.approx(joined.nrmse, abs=1e-12)


def test_per_trajectory_mode_averages(monkeypatch):
    """NRMSEs 0.2 and 0.4 average to 0.3."""
    scores = iter([0.2, 0.4])
    monkeypatch.setattr(
        "app.services.simulation.simulate_trajectory",
        lambda model, traj, names=None: SimpleNamespace(nrmse=next(scores), horizon=1),
    )
    summary = evaluate_per_trajectory(_random_model("rnn"), _dataset(_traj("a", 20, 0), _traj("b", 20, 1)))
    assert summary.nrmse == pytest.approx(0.3)


def test_threaded_evaluation_matches_serial():
    model = _random_model("tcn", seed=3)
    dataset = _dataset(*(_traj(f"t{i}", 40, i) for i in range(4)))
    serial = evaluate_per_trajectory(model, dataset)
    threaded = evaluate_per_trajectory(model, dataset, workers=3)
    assert serial.per_trajectory == threaded.per_trajectory


def test_concatenated_mode_is_one_continuous_run():
    """Joined in dataset order with one prefix; deterministic."""
    model = _random_model("rnn", seed=6)
    dataset = _dataset(_traj("a", 25, 1), _traj("b", 35, 2))
    first = evaluate_concatenated(model, dataset)
    second = evaluate(model, dataset, "concatenated")
    assert first.nrmse == second.nrmse
    (result,) = first.results
    assert result.horizon == 60 - 3
    assert np.array_equal(result.measured[25:], dataset.trajectories[1].outputs)


def test_concatenated_reset_excludes_every_prefix():
    model = _random_model("lstm", seed=1)
    dataset = _dataset(_traj("a", 25, 1), _traj("b", 35, 2))
    summary = evaluate_concatenated(model, dataset, reset_per_trajectory=True)
    assert summary.results[0].horizon == 60 - 2 * 3


def test_unknown_mode():
    with pytest.raises(ValueError):
        evaluate(_random_model("rnn"), _dataset(_traj("a", 20, 0)), "rolling")


def test_dimension_mismatch_is_reported():
    """A two-output dataset does not fit a one-output model."""
    traj = Trajectory("a", 0.1, np.zeros(10), np.ones((10, 2)))
    dataset = Dataset((traj,), "test", ("u",), ("p", "s"))
    with pytest.raises(DimensionError):
        evaluate_per_trajectory(_random_model("mlp"), dataset)


def test_result_frame_layout(tmp_path):
    """Predictions are empty over the prefix and named <output>_pred."""
    model = _random_model("mlp")
    result = simulate_trajectory(model, _traj("a", 12, 0), ["y"])
    frame = result.to_frame(["u"], ["y"])
    assert list(frame.columns) == ["t", "u", "y", "y_pred"]
    assert frame["y_pred"][:3].isna().all()
    assert frame["y_pred"][3:].notna().all()
    path = result.write_csv(tmp_path / "series" / "a.csv", ["u"], ["y"])
    assert path.exists()


def test_model_checkpoint_round_trip(tmp_path):
    """Normalizer, warmup and metadata survive save and load."""
    model = _random_model("gru", seed=7)
    path = model.save(tmp_path / "model.npz", {"strategy": "parallel", "dataset": "valve"})
    loaded = SimulationModel.load(path)
    assert loaded.warmup_steps == 3
    assert loaded.metadata["strategy"] == "parallel"
    assert np.array_equal(loaded.normalizer.output_std, model.normalizer.output_std)
    traj = _traj("a", 30, 9)
    assert np.array_equal(
        simulate_trajectory(model, traj).predicted, simulate_trajectory(loaded, traj).predicted
    )


def test_report_layout(tmp_path):
    """Report rows start with dataset,arch,strategy,nrmse."""
    path = write_report(
        [{"dataset": "valve", "arch": "rnn", "strategy": "parallel", "nrmse": 0.25, "mode": "per-trajectory"}],
        tmp_path / "report.csv",
    )
    header, row = path.read_text().splitlines()
    assert header.split(",")[:4] == REPORT_COLUMNS
    assert row.startswith("valve,rnn,parallel,0.250000")


def test_reference_results_include_linear_baseline():
    frame = load_reference_results()
    assert list(frame.columns) == REPORT_COLUMNS
    baseline = frame[(frame.dataset == "industrial_robot") & (frame.arch == "linear")]
    assert baseline.nrmse.tolist() == [0.82]
