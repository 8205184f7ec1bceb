"""Trajectories, datasets, CSV ingestion, normalization and resampling."""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml  # type: ignore[import-untyped]
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

MANIFEST_NAME = "dataset.yaml"
MANIFEST_SCHEMA_VERSION = 1
# std of a constant float channel is rounding noise, not exactly 0
CONSTANT_RTOL = 1e-12

Role = Literal["train", "test"]


class TrajectoryError(ValueError):
    """Raised when a trajectory violates its invariants."""


class CsvFormatError(ValueError):
    """Raised for malformed trajectory CSV files, with the offending location."""

    def __init__(
        self, message: str, row: Optional[int] = None, column: Optional[str] = None
    ):
        super().__init__(message)
        self.row = row
        self.column = column


class ZeroVarianceChannelError(ValueError):
    """Raised when a channel is constant and cannot be z-scored."""

    def __init__(self, channel: str):
        super().__init__(f"channel '{channel}' has zero variance")
        self.channel = channel


class DataLeakageError(ValueError):
    """Raised when normalization statistics are fitted on non-training data."""


class ResampleRatioError(ValueError):
    """Raised when the new sampling time is not an integer multiple."""


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled sequence of (u_i, y_i) pairs."""

    id: str
    sampling_time: float
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        outputs = np.array(self.outputs, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if outputs.ndim == 1:
            outputs = outputs[:, None]
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)

        if inputs.ndim != 2 or outputs.ndim != 2:
            raise TrajectoryError(f"trajectory '{self.id}': arrays must be 2-D")
        if inputs.shape[0] != outputs.shape[0]:
            raise TrajectoryError(
                f"trajectory '{self.id}': {inputs.shape[0]} input samples but "
                f"{outputs.shape[0]} output samples"
            )
        if inputs.shape[0] < 2:
            raise TrajectoryError(f"trajectory '{self.id}': needs at least 2 samples")
        if not self.sampling_time > 0:
            raise TrajectoryError(
                f"trajectory '{self.id}': sampling time must be positive"
            )
        if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(outputs))):
            raise TrajectoryError(f"trajectory '{self.id}': values must be finite")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.outputs.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n) * self.sampling_time


@dataclass(frozen=True)
class Dataset:
    """Trajectories sharing dimensions and sampling time."""

    trajectories: Tuple[Trajectory, ...]
    role: Role
    input_names: Tuple[str, ...]
    output_names: Tuple[str, ...]
    units: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        object.__setattr__(self, "input_names", tuple(self.input_names))
        object.__setattr__(self, "output_names", tuple(self.output_names))
        if not self.trajectories:
            raise TrajectoryError("dataset has no trajectories")
        first = self.trajectories[0]
        for traj in self.trajectories:
            if (traj.input_dim, traj.output_dim) != (first.input_dim, first.output_dim):
                raise TrajectoryError(
                    f"trajectory '{traj.id}' has dimensions "
                    f"({traj.input_dim}, {traj.output_dim}), expected "
                    f"({first.input_dim}, {first.output_dim})"
                )
            if not np.isclose(traj.sampling_time, first.sampling_time, rtol=1e-9):
                raise TrajectoryError(
                    f"trajectory '{traj.id}' has sampling time {traj.sampling_time}, "
                    f"expected {first.sampling_time}"
                )
        if len(self.input_names) != first.input_dim:
            raise TrajectoryError(
                f"{len(self.input_names)} input names for {first.input_dim} inputs"
            )
        if len(self.output_names) != first.output_dim:
            raise TrajectoryError(
                f"{len(self.output_names)} output names for {first.output_dim} outputs"
            )

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def sampling_time(self) -> float:
        return self.trajectories[0].sampling_time

    @property
    def input_dim(self) -> int:
        return self.trajectories[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.trajectories[0].output_dim

    def subset(self, indices: Sequence[int], role: Optional[Role] = None) -> "Dataset":
        return replace(
            self,
            trajectories=tuple(self.trajectories[i] for i in indices),
            role=role or self.role,
        )

    def with_trajectories(self, trajectories: Sequence[Trajectory]) -> "Dataset":
        return replace(self, trajectories=tuple(trajectories))


class DatasetSchema(BaseModel):
    """Declared column layout of a trajectory CSV."""

    model_config = ConfigDict(extra="forbid")

    time_column: str = "t"
    input_names: List[str] = Field(min_length=1)
    output_names: List[str] = Field(min_length=1)
    segment_column: Optional[str] = None
    sampling_time: Optional[float] = Field(None, gt=0)
    role: Role = "train"
    units: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _unique_columns(self) -> "DatasetSchema":
        columns = [self.time_column, *self.input_names, *self.output_names]
        if self.segment_column:
            columns.append(self.segment_column)
        if len(set(columns)) != len(columns):
            raise ValueError(f"schema columns must be unique, got {columns}")
        return self


def load_schema(path: Union[str, Path]) -> DatasetSchema:
    with open(path, "r") as f:
        return DatasetSchema.model_validate(yaml.safe_load(f) or {})


def _check_sampling(
    path: Path, times: np.ndarray, first_row: int, sampling_time: Optional[float]
) -> float:
    steps = np.diff(times)
    ts = float(np.median(steps)) if sampling_time is None else sampling_time
    if not ts > 0:
        raise CsvFormatError(
            f"{path}: time column is not increasing", row=first_row, column=None
        )
    irregular = np.flatnonzero(~np.isclose(steps, ts, rtol=1e-6, atol=1e-12))
    if irregular.size:
        row = first_row + int(irregular[0]) + 1
        raise CsvFormatError(
            f"{path}: non-uniform sampling at row {row} "
            f"(step {steps[irregular[0]]}, expected {ts})",
            row=row,
        )
    return ts


def load_csv(path: Union[str, Path], schema: DatasetSchema) -> Dataset:
    """
    Read trajectories from a CSV file.

    One trajectory per file, or one per distinct value of the schema's segment
    column. Rows are numbered from 1 for the first data line.

    Args:
        path: CSV file with header ``t,<u-names...>,<y-names...>``
        schema: Declared column layout

    Returns:
        Dataset with the schema's role
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.ParserError as e:
        raise CsvFormatError(f"{path}: inconsistent row lengths ({e})") from e

    numeric = [schema.time_column, *schema.input_names, *schema.output_names]
    required = numeric + ([schema.segment_column] if schema.segment_column else [])
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise CsvFormatError(
            f"{path}: missing columns {missing}", column=missing[0]
        )

    values = frame[numeric].apply(pd.to_numeric, errors="coerce").to_numpy(float)
    bad = ~np.isfinite(values)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise CsvFormatError(
            f"{path}: non-finite value at row {row + 1}, column '{numeric[col]}'",
            row=int(row) + 1,
            column=numeric[col],
        )

    n_inputs = len(schema.input_names)
    if schema.segment_column:
        segments = frame[schema.segment_column].to_numpy()
        groups = [
            (f"{path.stem}:{key}", np.flatnonzero(segments == key))
            for key in pd.unique(segments)
        ]
    else:
        groups = [(path.stem, np.arange(len(frame)))]

    trajectories = []
    for traj_id, rows in groups:
        if rows.size < 2:
            raise CsvFormatError(
                f"{path}: trajectory '{traj_id}' has fewer than 2 samples",
                row=int(rows[0]) + 1 if rows.size else None,
            )
        block = values[rows]
        ts = _check_sampling(path, block[:, 0], int(rows[0]) + 1, schema.sampling_time)
        trajectories.append(
            Trajectory(
                id=traj_id,
                sampling_time=ts,
                inputs=block[:, 1 : 1 + n_inputs],
                outputs=block[:, 1 + n_inputs :],
            )
        )

    logger.info(f"Loaded {len(trajectories)} trajectories from {path}")
    return Dataset(
        trajectories=tuple(trajectories),
        role=schema.role,
        input_names=tuple(schema.input_names),
        output_names=tuple(schema.output_names),
        units=dict(schema.units),
    )


def write_trajectory_csv(
    traj: Trajectory,
    path: Union[str, Path],
    input_names: Sequence[str],
    output_names: Sequence[str],
) -> Path:
    """Write ``t,<u...>,<y...>`` with shortest round-trip float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        np.column_stack([traj.times, traj.inputs, traj.outputs]),
        columns=["t", *input_names, *output_names],
    )
    frame.to_csv(path, index=False)
    return path


def write_dataset(
    directory: Union[str, Path],
    datasets: Sequence[Dataset],
    name: str = "dataset",
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write CSV files for every trajectory plus the YAML manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = datasets[0]
    files = []
    for dataset in datasets:
        for position, traj in enumerate(dataset):
            relative = f"{dataset.role}/{dataset.role}_{position:04d}.csv"
            write_trajectory_csv(
                traj, directory / relative, dataset.input_names, dataset.output_names
            )
            files.append({"path": relative, "role": dataset.role, "id": traj.id})

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "name": name,
        "sampling_time": first.sampling_time,
        "input_names": list(first.input_names),
        "output_names": list(first.output_names),
        "units": dict(first.units),
        "files": files,
    }
    if extra:
        manifest["extra"] = extra
    manifest_path = directory / MANIFEST_NAME
    with open(manifest_path, "w") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    logger.info(f"Wrote {len(files)} trajectories to {directory}")
    return manifest_path


def read_manifest(directory: Union[str, Path]) -> Dict[str, Any]:
    manifest_path = Path(directory) / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    with open(manifest_path, "r") as f:
        manifest = yaml.safe_load(f)
    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset manifest version {version}")
    return manifest


def read_dataset(directory: Union[str, Path], role: Role) -> Dataset:
    """Load every trajectory of ``role`` listed in the directory manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    schema = DatasetSchema(
        input_names=manifest["input_names"],
        output_names=manifest["output_names"],
        sampling_time=manifest["sampling_time"],
        role=role,
        units=manifest.get("units") or {},
    )
    trajectories = []
    for entry in manifest["files"]:
        if entry["role"] != role:
            continue
        loaded = load_csv(directory / entry["path"], schema)
        trajectories.extend(replace(t, id=entry["id"]) for t in loaded)
    if not trajectories:
        raise ValueError(f"dataset {directory} has no '{role}' trajectories")
    return Dataset(
        trajectories=tuple(trajectories),
        role=role,
        input_names=tuple(schema.input_names),
        output_names=tuple(schema.output_names),
        units=dict(schema.units),
    )


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel z-score statistics fitted on training data."""

    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray

    def normalize_inputs(self, values: np.ndarray) -> np.ndarray:
        return (values - self.input_mean) / self.input_std

    def normalize_outputs(self, values: np.ndarray) -> np.ndarray:
        return (values - self.output_mean) / self.output_std

    def denormalize_inputs(self, values: np.ndarray) -> np.ndarray:
        return values * self.input_std + self.input_mean

    def denormalize_outputs(self, values: np.ndarray) -> np.ndarray:
        return values * self.output_std + self.output_mean

    def apply(self, traj: Trajectory) -> Trajectory:
        return replace(
            traj,
            inputs=self.normalize_inputs(traj.inputs),
            outputs=self.normalize_outputs(traj.outputs),
        )

    def invert(self, traj: Trajectory) -> Trajectory:
        return replace(
            traj,
            inputs=self.denormalize_inputs(traj.inputs),
            outputs=self.denormalize_outputs(traj.outputs),
        )

    def apply_dataset(self, dataset: Dataset) -> Dataset:
        return dataset.with_trajectories([self.apply(t) for t in dataset])

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "output_mean": self.output_mean.tolist(),
            "output_std": self.output_std.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "NormalizationStats":
        return cls(**{key: np.asarray(value, dtype=np.float64) for key, value in data.items()})


def constant_channels(values: np.ndarray) -> np.ndarray:
    """Per-column flag: std within rounding of zero relative to the column scale."""
    values = np.asarray(values, dtype=np.float64)
    scale = np.maximum(1.0, np.abs(values.mean(axis=0)))
    return values.std(axis=0) <= CONSTANT_RTOL * scale


def fit_normalizer(train: Dataset) -> NormalizationStats:
    """Fit per-channel mean and (population) standard deviation."""
    if train.role != "train":
        raise DataLeakageError(
            f"normalization must be fitted on training data, got role '{train.role}'"
        )
    inputs = np.concatenate([t.inputs for t in train])
    outputs = np.concatenate([t.outputs for t in train])
    input_std = inputs.std(axis=0)
    output_std = outputs.std(axis=0)
    for names, values in ((train.input_names, inputs), (train.output_names, outputs)):
        for channel, constant in zip(names, constant_channels(values)):
            if constant:
                raise ZeroVarianceChannelError(channel)
    return NormalizationStats(
        input_mean=inputs.mean(axis=0),
        input_std=input_std,
        output_mean=outputs.mean(axis=0),
        output_std=output_std,
    )


def resample(traj: Trajectory, new_sampling_time: float) -> Trajectory:
    """
    Decimate by an integer factor k after a width-k moving average.

    The kept samples are the averages of consecutive non-overlapping blocks of k
    samples; a trailing partial block is dropped.
    """
    ratio = new_sampling_time / traj.sampling_time
    factor = int(round(ratio))
    if factor < 1 or not np.isclose(ratio, factor, rtol=1e-9, atol=0.0):
        raise ResampleRatioError(
            f"new sampling time {new_sampling_time} is not an integer multiple of "
            f"{traj.sampling_time}"
        )
    if factor == 1:
        return traj
    blocks = traj.n // factor

    def decimate(values: np.ndarray) -> np.ndarray:
        return values[: blocks * factor].reshape(blocks, factor, -1).mean(axis=1)

    return Trajectory(
        id=traj.id,
        sampling_time=new_sampling_time,
        inputs=decimate(traj.inputs),
        outputs=decimate(traj.outputs),
    )


def resample_dataset(dataset: Dataset, new_sampling_time: float) -> Dataset:
    return dataset.with_trajectories([resample(t, new_sampling_time) for t in dataset])
