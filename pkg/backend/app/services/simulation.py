"""Free-running simulation and NRMSE evaluation."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from app.core import autodiff as ad
from app.services.architectures import (
    ModelParams,
    ModelSpec,
    OneStepPredictor,
    load_checkpoint,
    save_checkpoint,
)
from app.services.dataset import Dataset, NormalizationStats, Trajectory, constant_channels

logger = logging.getLogger(__name__)

EvaluationMode = Literal["per-trajectory", "concatenated"]
EVALUATION_MODES = ("per-trajectory", "concatenated")

REPORT_COLUMNS = ["dataset", "arch", "strategy", "nrmse"]
REFERENCE_RESULTS = Path(__file__).resolve().parent.parent / "resources" / "reference_results.csv"


class PrefixTooShortError(ValueError):
    """Raised when the measured prefix cannot seed the model."""

    def __init__(self, length: int, required: int, trajectory_id: Optional[str] = None):
        where = f" in trajectory '{trajectory_id}'" if trajectory_id else ""
        super().__init__(
            f"prefix of {length} samples{where} is too short, {required} required"
        )
        self.length = length
        self.required = required
        self.trajectory_id = trajectory_id


class DegenerateChannelError(ValueError):
    """Raised when a measured channel is constant over the evaluation horizon."""

    def __init__(self, channel: str, trajectory_id: Optional[str] = None):
        where = f" in trajectory '{trajectory_id}'" if trajectory_id else ""
        super().__init__(
            f"measured channel '{channel}'{where} is constant; NRMSE is undefined"
        )
        self.channel = channel
        self.trajectory_id = trajectory_id


@dataclass
class SimulationModel:
    """Trained network plus everything needed to run it on physical data."""

    spec: ModelSpec
    params: ModelParams
    normalizer: NormalizationStats
    warmup_steps: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.params.validate(self.spec)
        if self.warmup_steps < self.spec.min_history:
            raise PrefixTooShortError(self.warmup_steps, self.spec.min_history)

    def save(self, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
        meta = {**self.metadata, **(metadata or {})}
        meta["normalizer"] = self.normalizer.to_dict()
        meta["warmup_steps"] = self.warmup_steps
        return save_checkpoint(path, self.spec, self.params, meta)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SimulationModel":
        spec, params, meta = load_checkpoint(path)
        return cls(
            spec=spec,
            params=params,
            normalizer=NormalizationStats.from_dict(meta["normalizer"]),
            warmup_steps=int(meta["warmup_steps"]),
            metadata=meta,
        )

    def check_dataset(self, dataset: Dataset) -> None:
        if (dataset.input_dim, dataset.output_dim) != (
            self.spec.input_dim,
            self.spec.output_dim,
        ):
            raise ad.DimensionError(
                f"checkpoint expects {self.spec.input_dim} inputs and "
                f"{self.spec.output_dim} outputs, dataset has {dataset.input_dim} "
                f"and {dataset.output_dim}",
                [
                    (self.spec.input_dim, self.spec.output_dim),
                    (dataset.input_dim, dataset.output_dim),
                ],
            )


def rollout(
    spec: ModelSpec,
    params: ModelParams,
    prefix_outputs: np.ndarray,
    inputs: np.ndarray,
) -> np.ndarray:
    """
    Batched free run in normalized space.

    Args:
        spec: Architecture
        params: Parameter values
        prefix_outputs: Measured outputs y_0..y_{P-1}, shape (B, P, output_dim)
        inputs: Inputs u_0..u_{n-1}, shape (B, n, input_dim)

    Returns:
        Predictions of y_P..y_{n-1}, shape (B, n - P, output_dim)
    """
    batch, prefix, _ = prefix_outputs.shape
    n = inputs.shape[1]
    if prefix < spec.min_history:
        raise PrefixTooShortError(prefix, spec.min_history)
    predictor = OneStepPredictor(spec, params.constants(), batch_size=batch)

    for k in range(prefix - 1):
        predictor.push(prefix_outputs[:, k], inputs[:, k])
    predicted = predictor.step(prefix_outputs[:, prefix - 1], inputs[:, prefix - 1])
    outputs = [predicted.data]
    for k in range(prefix, n - 1):
        predicted = predictor.step(predicted, inputs[:, k])
        outputs.append(predicted.data)
    return np.stack(outputs, axis=1)


def free_run(
    model: SimulationModel,
    prefix_outputs: np.ndarray,
    inputs: np.ndarray,
) -> np.ndarray:
    """
    Simulate from a measured prefix, feeding predictions back as the y-input.

    Only ``prefix_outputs`` is read from the measured outputs; every later step
    uses the model's own prediction. The horizon is bounded by ``inputs`` alone.

    Args:
        model: Trained model with its normalizer
        prefix_outputs: Measured y_0..y_{P-1} in physical units, shape (P, output_dim)
        inputs: u_0..u_{n-1} in physical units, shape (n, input_dim), n > P

    Returns:
        Predicted y_P..y_{n-1} in physical units, shape (n - P, output_dim)
    """
    prefix_outputs = np.atleast_2d(np.asarray(prefix_outputs, dtype=np.float64))
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    prefix = prefix_outputs.shape[0]
    if prefix < model.spec.min_history:
        raise PrefixTooShortError(prefix, model.spec.min_history)
    if inputs.shape[0] <= prefix:
        raise ValueError(
            f"inputs cover {inputs.shape[0]} samples, more than the prefix ({prefix}) needed"
        )
    normalizer = model.normalizer
    predicted = rollout(
        model.spec,
        model.params,
        normalizer.normalize_outputs(prefix_outputs)[None],
        normalizer.normalize_inputs(inputs)[None],
    )
    return normalizer.denormalize_outputs(predicted[0])


def nrmse_per_channel(
    measured: np.ndarray,
    predicted: np.ndarray,
    channel_names: Optional[Sequence[str]] = None,
    trajectory_id: Optional[str] = None,
) -> np.ndarray:
    """Per-channel sqrt(mean(((y - ŷ) / σ)²)); σ is the measured std over the horizon."""
    measured = np.atleast_2d(np.asarray(measured, dtype=np.float64).T).T
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64).T).T
    if measured.shape != predicted.shape:
        raise ad.DimensionError(
            f"measured {measured.shape} and predicted {predicted.shape} differ",
            [measured.shape, predicted.shape],
        )
    if measured.shape[0] < 2:
        raise ValueError("NRMSE needs at least 2 samples")
    sigma = measured.std(axis=0)
    for channel, constant in enumerate(constant_channels(measured)):
        if constant:
            name = channel_names[channel] if channel_names else str(channel)
            raise DegenerateChannelError(name, trajectory_id)
    with np.errstate(over="ignore", invalid="ignore"):
        per_channel = np.sqrt(np.mean(((measured - predicted) / sigma) ** 2, axis=0))
    return np.where(np.isfinite(per_channel), per_channel, np.inf)


def nrmse(
    measured: np.ndarray,
    predicted: np.ndarray,
    channel_names: Optional[Sequence[str]] = None,
    trajectory_id: Optional[str] = None,
) -> float:
    """
    Normalized root mean squared error over n samples and m channels.

    sqrt((1/n) Σ_k Σ_i ((y_i^k - ŷ_i^k) / σ_k)²), summed over channels k and
    averaged over samples i only.
    """
    per_channel = nrmse_per_channel(measured, predicted, channel_names, trajectory_id)
    return float(np.sqrt(np.sum(per_channel**2)))


@dataclass
class SimulationResult:
    """Measured and simulated series of one free run in physical units."""

    trajectory_id: str
    sampling_time: float
    inputs: np.ndarray
    measured: np.ndarray
    predicted: np.ndarray
    prefix_length: int
    channel_nrmse: np.ndarray
    nrmse: float

    @property
    def horizon(self) -> int:
        return self.predicted.shape[0]

    def to_frame(self, input_names: Sequence[str], output_names: Sequence[str]) -> pd.DataFrame:
        """One row per sample; predictions are empty over the measured prefix."""
        n = self.measured.shape[0]
        padded = np.full((n, self.predicted.shape[1]), np.nan)
        padded[self.prefix_length :] = self.predicted
        frame = pd.DataFrame({"t": np.arange(n) * self.sampling_time})
        for position, name in enumerate(input_names):
            frame[name] = self.inputs[:, position]
        for position, name in enumerate(output_names):
            frame[name] = self.measured[:, position]
        for position, name in enumerate(output_names):
            frame[f"{name}_pred"] = padded[:, position]
        return frame

    def write_csv(
        self, path: Union[str, Path], input_names: Sequence[str], output_names: Sequence[str]
    ) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame(input_names, output_names).to_csv(path, index=False)
        return path


@dataclass
class EvaluationSummary:
    mode: EvaluationMode
    nrmse: float
    results: List[SimulationResult] = field(default_factory=list)

    @property
    def per_trajectory(self) -> Dict[str, float]:
        return {result.trajectory_id: result.nrmse for result in self.results}

    @property
    def horizon(self) -> int:
        return sum(result.horizon for result in self.results)


def _result(
    trajectory_id: str,
    sampling_time: float,
    inputs: np.ndarray,
    measured: np.ndarray,
    predicted: np.ndarray,
    prefix: int,
    output_names: Optional[Sequence[str]],
) -> SimulationResult:
    per_channel = nrmse_per_channel(measured[prefix:], predicted, output_names, trajectory_id)
    return SimulationResult(
        trajectory_id=trajectory_id,
        sampling_time=sampling_time,
        inputs=inputs,
        measured=measured,
        predicted=predicted,
        prefix_length=prefix,
        channel_nrmse=per_channel,
        nrmse=float(np.sqrt(np.sum(per_channel**2))),
    )


def _check_length(model: SimulationModel, traj: Trajectory) -> None:
    if traj.n < model.warmup_steps + 2:
        raise PrefixTooShortError(traj.n, model.warmup_steps + 2, traj.id)


def simulate_trajectory(
    model: SimulationModel,
    traj: Trajectory,
    output_names: Optional[Sequence[str]] = None,
) -> SimulationResult:
    """Free-run one trajectory from its first ``warmup_steps`` measured samples."""
    _check_length(model, traj)
    prefix = model.warmup_steps
    predicted = free_run(model, traj.outputs[:prefix], traj.inputs)
    return _result(
        traj.id, traj.sampling_time, traj.inputs, traj.outputs, predicted, prefix, output_names
    )


def evaluate_per_trajectory(
    model: SimulationModel, dataset: Dataset, workers: int = 1
) -> EvaluationSummary:
    """
    Free-run every trajectory independently and average the NRMSEs.

    Args:
        model: Trained model
        dataset: Test trajectories in physical units
        workers: Threads used to simulate trajectories concurrently

    Returns:
        Summary with the arithmetic mean and one result per trajectory
    """
    model.check_dataset(dataset)
    names = dataset.output_names
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda t: simulate_trajectory(model, t, names), dataset))
    else:
        results = [simulate_trajectory(model, traj, names) for traj in dataset]
    mean = float(np.mean([result.nrmse for result in results]))
    logger.info(f"Per-trajectory NRMSE over {len(results)} trajectories: {mean:.4f}")
    return EvaluationSummary("per-trajectory", mean, results)


def evaluate_concatenated(
    model: SimulationModel, dataset: Dataset, reset_per_trajectory: bool = False
) -> EvaluationSummary:
    """
    Join the trajectories in dataset order and score one continuous free run.

    With ``reset_per_trajectory`` every trajectory is re-seeded from its own
    measured prefix; the prefixes are then excluded from the joint horizon.
    """
    model.check_dataset(dataset)
    names = dataset.output_names
    prefix = model.warmup_steps
    inputs = np.concatenate([t.inputs for t in dataset])
    measured = np.concatenate([t.outputs for t in dataset])

    if reset_per_trajectory:
        for traj in dataset:
            _check_length(model, traj)
        predicted = np.concatenate(
            [free_run(model, t.outputs[:prefix], t.inputs) for t in dataset]
        )
        scored = np.concatenate([t.outputs[prefix:] for t in dataset])
        per_channel = nrmse_per_channel(scored, predicted, names, "concatenated")
        result = SimulationResult(
            trajectory_id="concatenated",
            sampling_time=dataset.sampling_time,
            inputs=np.concatenate([t.inputs[prefix:] for t in dataset]),
            measured=scored,
            predicted=predicted,
            prefix_length=0,
            channel_nrmse=per_channel,
            nrmse=float(np.sqrt(np.sum(per_channel**2))),
        )
    else:
        joined = Trajectory("concatenated", dataset.sampling_time, inputs, measured)
        _check_length(model, joined)
        predicted = free_run(model, measured[:prefix], inputs)
        result = _result(
            "concatenated", dataset.sampling_time, inputs, measured, predicted, prefix, names
        )

    logger.info(
        f"Concatenated NRMSE over {result.horizon} samples: {result.nrmse:.4f}"
    )
    return EvaluationSummary("concatenated", result.nrmse, [result])


def evaluate(
    model: SimulationModel,
    dataset: Dataset,
    mode: EvaluationMode = "per-trajectory",
    workers: int = 1,
) -> EvaluationSummary:
    if mode == "per-trajectory":
        return evaluate_per_trajectory(model, dataset, workers)
    if mode == "concatenated":
        return evaluate_concatenated(model, dataset)
    raise ValueError(f"unknown evaluation mode '{mode}', expected one of {EVALUATION_MODES}")


def write_report(rows: Sequence[Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Write ``dataset,arch,strategy,nrmse`` rows (extra keys become extra columns)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows))
    extra = [column for column in frame.columns if column not in REPORT_COLUMNS]
    frame = frame.reindex(columns=REPORT_COLUMNS + extra)
    frame.to_csv(path, index=False, float_format="%.6f")
    return path


def load_reference_results(path: Union[str, Path] = REFERENCE_RESULTS) -> pd.DataFrame:
    """Published NRMSE values for the laboratory datasets (reference only)."""
    return pd.read_csv(path)
