"""Series-parallel and parallel training with AdamW, clipping and early stopping.

Series-parallel training feeds measured outputs into the model at every step
(teacher forcing). Parallel training seeds the model with ``warmup_steps``
measured samples and then feeds its own predictions back for ``unroll_length``
steps, backpropagating through the whole rollout.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from app.core import autodiff as ad
from app.core.autodiff import GradientTape, Tensor
from app.core.rng import TRAINING_STREAMS, spawn_streams
from app.services.architectures import ModelParams, ModelSpec, OneStepPredictor, init_params
from app.services.dataset import Dataset, NormalizationStats, fit_normalizer
from app.services.simulation import (
    DegenerateChannelError,
    SimulationModel,
    evaluate_per_trajectory,
)
from pydantic import BaseModel, ConfigDict, Field, field_validator

logger = logging.getLogger(__name__)

Strategy = Literal["series_parallel", "parallel"]
STRATEGIES = ("series_parallel", "parallel")

RECORD_COLUMNS = ["epoch", "train_loss", "val_loss", "val_nrmse", "clipped", "seconds"]


class TrajectoryTooShortError(ValueError):
    """Raised when a trajectory cannot hold one training segment."""

    def __init__(self, trajectory_id: str, length: int, required: int):
        super().__init__(
            f"trajectory '{trajectory_id}' has {length} samples, "
            f"training segments need {required}"
        )
        self.trajectory_id = trajectory_id
        self.length = length
        self.required = required


class NonFiniteGradientError(FloatingPointError):
    """Raised when gradients contain NaN or Inf; names the affected parameters."""

    def __init__(self, names: List[str]):
        super().__init__(f"non-finite gradients for parameters: {', '.join(names)}")
        self.names = names


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite; carries the record so far."""

    def __init__(self, record: "TrainRecord", reason: str):
        super().__init__(
            f"training diverged in epoch {len(record.epochs) + 1}: {reason}"
        )
        self.record = record
        self.reason = reason


class TrainingConfig(BaseModel):
    """Optimizer, strategy and stopping hyperparameters of one training run."""

    model_config = ConfigDict(extra="forbid")

    strategy: Strategy = "parallel"
    unroll_length: int = Field(50, ge=1)
    warmup_steps: int = Field(10, ge=1)
    segment_stride: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    clip_norm: Optional[float] = Field(1.0, gt=0)
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(10, ge=0)
    validation_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = 0
    track_val_nrmse: bool = True

    @field_validator("betas")
    @classmethod
    def _betas_in_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if not all(0.0 <= beta < 1.0 for beta in value):
            raise ValueError(f"betas must lie in [0, 1), got {value}")
        return value

    @property
    def stride(self) -> int:
        return self.segment_stride or self.unroll_length

    def check_compatible(self, spec: ModelSpec) -> None:
        if not spec.is_recurrent and self.warmup_steps < spec.window_length:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be at least the window "
                f"length ({spec.window_length}) for {spec.kind}"
            )


@dataclass
class SegmentBatch:
    """Aligned segments: the first ``warmup`` steps only seed the model."""

    outputs: np.ndarray  # (B, S, output_dim)
    inputs: np.ndarray  # (B, S, input_dim)
    warmup: int

    @property
    def size(self) -> int:
        return self.outputs.shape[0]

    @property
    def length(self) -> int:
        return self.outputs.shape[1]

    @property
    def targets(self) -> np.ndarray:
        return self.outputs[:, self.warmup :]


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_nrmse: Optional[float]
    clipped: int
    seconds: float


@dataclass
class TrainRecord:
    strategy: str
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    stopped_early_at: Optional[int] = None
    diverged: bool = False

    @property
    def best_val_loss(self) -> Optional[float]:
        if self.best_epoch is None:
            return None
        return self.epochs[self.best_epoch - 1].val_loss

    def losses(self) -> List[Tuple[float, float]]:
        return [(e.train_loss, e.val_loss) for e in self.epochs]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [vars(e) for e in self.epochs], columns=RECORD_COLUMNS
        )

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


@dataclass
class TrainResult:
    spec: ModelSpec
    params: ModelParams
    normalizer: NormalizationStats
    record: TrainRecord
    warmup_steps: int

    @property
    def model(self) -> SimulationModel:
        return SimulationModel(self.spec, self.params, self.normalizer, self.warmup_steps)


def split_dataset(
    dataset: Dataset, validation_fraction: float, rng: np.random.Generator
) -> Tuple[Dataset, Dataset]:
    """Split at trajectory granularity; each part keeps dataset order."""
    count = len(dataset)
    if count < 2:
        raise ValueError("a train/validation split needs at least 2 trajectories")
    n_val = min(count - 1, max(1, int(round(validation_fraction * count))))
    order = rng.permutation(count)
    val_idx = sorted(order[:n_val].tolist())
    train_idx = sorted(order[n_val:].tolist())
    return dataset.subset(train_idx, "train"), dataset.subset(val_idx, "train")


def segment_layout(spec: ModelSpec, config: TrainingConfig) -> Tuple[int, int, int, int]:
    """(segment length, warmup, first start, stride) of the batches for a strategy."""
    if spec.is_recurrent:
        return config.warmup_steps + config.unroll_length, config.warmup_steps, 0, config.stride
    window = spec.window_length
    if config.strategy == "series_parallel":
        # windows end at k >= L, one target each
        return window + 1, window, 1, 1
    # first target y_{L+1}, as for series-parallel pairs
    first = max(0, window + 1 - config.warmup_steps)
    return config.warmup_steps + config.unroll_length, config.warmup_steps, first, config.stride


def build_batches(
    dataset: Dataset,
    spec: ModelSpec,
    config: TrainingConfig,
    rng: Optional[np.random.Generator] = None,
) -> List[SegmentBatch]:
    """
    Cut trajectories into equal-length segments and group them into batches.

    Series-parallel feedforward models get one (window, target) pair per segment,
    taken at every admissible position. Recurrent series-parallel and all parallel
    runs get contiguous segments of ``warmup_steps + unroll_length`` samples every
    ``stride`` samples; feedforward parallel segments are offset so their first
    target is the first series-parallel target. With ``rng`` the segment order
    is shuffled across trajectories; without it batches keep dataset order.
    """
    length, warmup, first, stride = segment_layout(spec, config)
    positions: List[Tuple[int, int]] = []
    for index, traj in enumerate(dataset):
        required = length + first
        if traj.n < required:
            raise TrajectoryTooShortError(traj.id, traj.n, required)
        positions.extend(
            (index, start) for start in range(first, traj.n - length + 1, stride)
        )

    if rng is not None:
        positions = [positions[i] for i in rng.permutation(len(positions))]

    trajectories = dataset.trajectories
    batches = []
    for offset in range(0, len(positions), config.batch_size):
        chunk = positions[offset : offset + config.batch_size]
        batches.append(
            SegmentBatch(
                outputs=np.stack(
                    [trajectories[i].outputs[s : s + length] for i, s in chunk]
                ),
                inputs=np.stack([trajectories[i].inputs[s : s + length] for i, s in chunk]),
                warmup=warmup,
            )
        )
    return batches


def _segment_predictions(
    spec: ModelSpec,
    params: Mapping[str, Tensor],
    batch: SegmentBatch,
    feedback: bool,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    """Predictions of y_W..y_{S-1}, stacked to (B, S - W, output_dim)."""
    predictor = OneStepPredictor(spec, params, batch.size, training, rng)
    skip = 0 if spec.is_recurrent else max(0, batch.warmup - spec.window_length)
    predictions: List[Tensor] = []
    for k in range(skip, batch.length - 1):
        if feedback and predictions:
            y_k = predictions[-1]
        else:
            y_k = batch.outputs[:, k]
        out = predictor.push(y_k, batch.inputs[:, k])
        if k + 1 < batch.warmup:
            continue
        predictions.append(out if out is not None else predictor.predict())
    return ad.stack(predictions, axis=1)


def series_parallel_loss(
    spec: ModelSpec,
    params: Mapping[str, Tensor],
    batch: SegmentBatch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """MSE of one-step predictions from measured (teacher-forced) history."""
    predictions = _segment_predictions(spec, params, batch, False, training, rng)
    return ad.mse(predictions, batch.targets)


def parallel_rollout_loss(
    spec: ModelSpec,
    params: Mapping[str, Tensor],
    batch: SegmentBatch,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    MSE of a rollout that feeds its own predictions back after the warmup.

    The warmup steps use measured outputs; from the first prediction on, each
    prediction becomes the next y-input, so gradients flow through every
    unrolled step.
    """
    predictions = _segment_predictions(spec, params, batch, True, training, rng)
    return ad.mse(predictions, batch.targets)


LossFn = Callable[..., Tensor]
STRATEGY_LOSSES: Dict[str, LossFn] = {
    "series_parallel": series_parallel_loss,
    "parallel": parallel_rollout_loss,
}


def loss_and_gradients(
    spec: ModelSpec,
    params: ModelParams,
    batch: SegmentBatch,
    strategy: Strategy,
    training: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    with GradientTape() as tape:
        tensors = params.watch(tape)
        loss = STRATEGY_LOSSES[strategy](spec, tensors, batch, training, rng)
        grads = tape.gradient(loss, tensors)
    return loss.item(), grads


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(
    grads: Mapping[str, np.ndarray], clip_norm: float
) -> Dict[str, np.ndarray]:
    """Rescale all gradients together when their global L2 norm exceeds ``clip_norm``."""
    if clip_norm <= 0:
        raise ValueError(f"clip_norm must be positive, got {clip_norm}")
    norm = global_norm(grads)
    if norm <= clip_norm:
        return dict(grads)
    scale = clip_norm / norm
    return {name: g * scale for name, g in grads.items()}


def adamw_step(
    params: ModelParams,
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    config: TrainingConfig,
) -> Tuple[ModelParams, OptimizerState]:
    """
    One AdamW update with weight decay decoupled from the adaptive term.

    θ ← θ - lr · (m̂ / (√v̂ + ε) + λθ)

    Returns:
        New parameters and optimizer state; the inputs are left untouched
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad)
    beta1, beta2 = config.betas
    step = state.step + 1
    lr, decay, eps = config.learning_rate, config.weight_decay, config.adam_eps

    updated, m, v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1**step)
        v_hat = v[name] / (1.0 - beta2**step)
        updated[name] = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + decay * theta)
    return ModelParams(updated), OptimizerState(m, v, step)


def evaluate_loss(
    spec: ModelSpec, params: ModelParams, batches: List[SegmentBatch], strategy: Strategy
) -> float:
    """Sample-weighted mean strategy loss without dropout."""
    constants = params.constants()
    loss_fn = STRATEGY_LOSSES[strategy]
    total = sum(loss_fn(spec, constants, batch).item() * batch.size for batch in batches)
    return total / sum(batch.size for batch in batches)


def train(
    spec: ModelSpec,
    dataset: Dataset,
    config: TrainingConfig,
    epoch_callback: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """
    Fit a model with the configured strategy and return the best-validation parameters.

    The dataset is split by trajectory, normalized with statistics of the training
    part, and trained epoch by epoch. Validation uses the training strategy's own
    loss; free-run validation NRMSE is recorded alongside.

    Args:
        spec: Architecture to train
        dataset: Training trajectories in physical units
        config: Training hyperparameters
        epoch_callback: Called with each finished epoch record

    Returns:
        TrainResult holding the best parameters, normalizer and record

    Raises:
        TrainingDivergedError: When a loss or gradient stops being finite
    """
    config.check_compatible(spec)
    if (dataset.input_dim, dataset.output_dim) != (spec.input_dim, spec.output_dim):
        raise ad.DimensionError(
            f"spec expects ({spec.input_dim}, {spec.output_dim}) channels, dataset "
            f"has ({dataset.input_dim}, {dataset.output_dim})",
            [(spec.input_dim, spec.output_dim), (dataset.input_dim, dataset.output_dim)],
        )
    streams = spawn_streams(config.seed, TRAINING_STREAMS)
    train_part, val_part = split_dataset(dataset, config.validation_fraction, streams["split"])
    normalizer = fit_normalizer(train_part)
    train_norm = normalizer.apply_dataset(train_part)
    val_batches = build_batches(normalizer.apply_dataset(val_part), spec, config)

    params = init_params(spec, streams["init"])
    state = OptimizerState.zeros(params)
    record = TrainRecord(strategy=config.strategy)
    best_params, best_val = params.copy(), math.inf
    wait = 0
    logger.info(
        f"Training {spec.kind} ({params.num_values} parameters) with "
        f"{config.strategy} strategy on {len(train_part)} trajectories, "
        f"validating on {len(val_part)}"
    )

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        batches = build_batches(train_norm, spec, config, streams["batches"])
        total, samples, clipped = 0.0, 0, 0
        for batch in batches:
            loss, grads = loss_and_gradients(
                spec, params, batch, config.strategy, True, streams["dropout"]
            )
            if not math.isfinite(loss):
                record.diverged = True
                raise TrainingDivergedError(record, f"training loss is {loss}")
            if config.clip_norm is not None and global_norm(grads) > config.clip_norm:
                clipped += 1
                grads = clip_gradients(grads, config.clip_norm)
            try:
                params, state = adamw_step(params, grads, state, config)
            except (NonFiniteGradientError, ad.NonFiniteValueError) as e:
                record.diverged = True
                raise TrainingDivergedError(record, str(e)) from e
            total += loss * batch.size
            samples += batch.size

        val_loss = evaluate_loss(spec, params, val_batches, config.strategy)
        if not math.isfinite(val_loss):
            record.diverged = True
            raise TrainingDivergedError(record, f"validation loss is {val_loss}")
        val_nrmse = None
        if config.track_val_nrmse:
            model = SimulationModel(spec, params, normalizer, config.warmup_steps)
            try:
                val_nrmse = evaluate_per_trajectory(model, val_part).nrmse
            except DegenerateChannelError as e:
                logger.warning(f"Skipping validation NRMSE: {e}")

        entry = EpochRecord(
            epoch=epoch,
            train_loss=total / samples,
            val_loss=val_loss,
            val_nrmse=val_nrmse,
            clipped=clipped,
            seconds=time.perf_counter() - started,
        )
        record.epochs.append(entry)
        if epoch_callback:
            epoch_callback(entry)
        logger.info(
            f"Epoch {epoch}: train {entry.train_loss:.6f}, val {val_loss:.6f}, "
            f"val NRMSE {val_nrmse if val_nrmse is None else round(val_nrmse, 4)}, "
            f"clipped {clipped}/{len(batches)}"
        )

        if val_loss < best_val:
            best_val, best_params, record.best_epoch = val_loss, params.copy(), epoch
            wait = 0
        else:
            wait += 1
            if wait > config.patience:
                record.stopped_early_at = epoch
                logger.info(
                    f"Early stopping after epoch {epoch}; best epoch {record.best_epoch}"
                )
                break

    return TrainResult(spec, best_params, normalizer, record, config.warmup_steps)
