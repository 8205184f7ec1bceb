"""Network architectures behind a single one-step predictor interface.

Every model maps the recent history of ``[y, u]`` samples to the next output.
Feedforward kinds (MLP, TCN) see an explicit window of ``window_length`` rows;
recurrent kinds (RNN, LSTM, GRU) consume one sample per step and carry a hidden
state. All forward code is written against ``app.core.autodiff`` so the same
functions run on a gradient tape (training) or on plain values (simulation).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from app.core import autodiff as ad
from app.core.autodiff import Tensor
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

ModelKind = Literal["mlp", "rnn", "lstm", "gru", "tcn"]
MODEL_KINDS: Tuple[str, ...] = ("mlp", "rnn", "lstm", "gru", "tcn")
FEEDFORWARD_KINDS = ("mlp", "tcn")
RECURRENT_KINDS = ("rnn", "lstm", "gru")

CHECKPOINT_FORMAT_VERSION = 1
_META_KEY = "__meta__"


class SpecMismatchError(ValueError):
    """Raised when inputs or parameters disagree with the ModelSpec."""


class WindowUnderfullError(RuntimeError):
    """Raised when a feedforward predictor has seen fewer than L samples."""

    def __init__(self, seen: int, required: int):
        super().__init__(
            f"window underfull: {seen} samples seen, {required} required"
        )
        self.seen = seen
        self.required = required


class ModelSpec(BaseModel):
    """Architecture choice plus the hyperparameters that fix every shape."""

    model_config = ConfigDict(extra="forbid")

    kind: ModelKind
    window_length: int = Field(10, ge=1)
    input_dim: int = Field(ge=1)
    output_dim: int = Field(ge=1)
    hidden_sizes: List[int] = Field(default_factory=lambda: [32])
    activation: Literal["tanh", "sigmoid", "relu", "identity"] = "tanh"
    skip_connection: bool = False
    dropout_p: float = Field(0.0, ge=0.0, lt=1.0)
    tcn_kernel_width: int = Field(3, ge=1)
    tcn_dilations: List[int] = Field(default_factory=lambda: [1, 2, 4])

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(width < 1 for width in value):
            raise ValueError(f"hidden sizes must be positive, got {value}")
        return value

    @field_validator("tcn_dilations")
    @classmethod
    def _positive_dilations(cls, value: List[int]) -> List[int]:
        if any(dilation < 1 for dilation in value):
            raise ValueError(f"dilations must be >= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _check_layers(self) -> "ModelSpec":
        if self.kind in RECURRENT_KINDS and not self.hidden_sizes:
            raise ValueError(f"{self.kind} needs at least one hidden layer")
        if self.kind == "tcn":
            if not self.hidden_sizes:
                raise ValueError("tcn needs at least one convolution layer")
            if len(self.tcn_dilations) != len(self.hidden_sizes):
                raise ValueError(
                    "tcn_dilations must give one dilation per layer in hidden_sizes"
                )
            if self.receptive_field > self.window_length:
                logger.warning(
                    f"TCN receptive field {self.receptive_field} exceeds window "
                    f"length {self.window_length}; part of it only sees padding"
                )
        return self

    @property
    def feature_dim(self) -> int:
        return self.output_dim + self.input_dim

    @property
    def is_recurrent(self) -> bool:
        return self.kind in RECURRENT_KINDS

    @property
    def receptive_field(self) -> int:
        return 1 + sum(
            (self.tcn_kernel_width - 1) * dilation for dilation in self.tcn_dilations
        )

    @property
    def min_history(self) -> int:
        """Measured samples needed before the first prediction."""
        return 1 if self.is_recurrent else self.window_length


@dataclass(frozen=True)
class ParameterInfo:
    shape: Tuple[int, ...]
    fan_in: Optional[int]  # None marks a bias (zero init)


def parameter_layout(spec: ModelSpec) -> Dict[str, ParameterInfo]:
    """Name, shape and fan-in of every learnable tensor, in a stable order."""
    layout: Dict[str, ParameterInfo] = {}
    features = spec.feature_dim

    if spec.kind == "mlp":
        sizes = [spec.window_length * features, *spec.hidden_sizes, spec.output_dim]
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            layout[f"dense{layer}.weight"] = ParameterInfo((fan_out, fan_in), fan_in)
            layout[f"dense{layer}.bias"] = ParameterInfo((fan_out,), None)
        return layout

    if spec.kind == "tcn":
        channels = features
        width = spec.tcn_kernel_width
        for layer, size in enumerate(spec.hidden_sizes):
            layout[f"tcn{layer}.kernel"] = ParameterInfo(
                (size, channels, width), channels * width
            )
            layout[f"tcn{layer}.bias"] = ParameterInfo((size,), None)
            if size != channels:
                layout[f"tcn{layer}.downsample"] = ParameterInfo(
                    (size, channels, 1), channels
                )
            channels = size
    else:
        gates = {"rnn": 1, "lstm": 4, "gru": 3}[spec.kind]
        inputs = features
        for layer, hidden in enumerate(spec.hidden_sizes):
            if spec.kind == "rnn":
                layout[f"rnn{layer}.W1"] = ParameterInfo((hidden, hidden), hidden)
                layout[f"rnn{layer}.W2"] = ParameterInfo((hidden, inputs), inputs)
                layout[f"rnn{layer}.b1"] = ParameterInfo((hidden,), None)
            elif spec.kind == "lstm":
                layout[f"lstm{layer}.W"] = ParameterInfo((gates * hidden, inputs), inputs)
                layout[f"lstm{layer}.U"] = ParameterInfo((gates * hidden, hidden), hidden)
                layout[f"lstm{layer}.b"] = ParameterInfo((gates * hidden,), None)
            else:
                layout[f"gru{layer}.W"] = ParameterInfo((gates * hidden, inputs), inputs)
                layout[f"gru{layer}.U_gates"] = ParameterInfo(
                    (2 * hidden, hidden), hidden
                )
                layout[f"gru{layer}.U_cand"] = ParameterInfo((hidden, hidden), hidden)
                layout[f"gru{layer}.b"] = ParameterInfo((gates * hidden,), None)
            inputs = hidden
        channels = spec.hidden_sizes[-1]

    layout["readout.weight"] = ParameterInfo((spec.output_dim, channels), channels)
    layout["readout.bias"] = ParameterInfo((spec.output_dim,), None)
    return layout


class ModelParams:
    """Named collection of learnable arrays."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self.tensors: Dict[str, np.ndarray] = {
            name: np.array(value, dtype=np.float64) for name, value in tensors.items()
        }
        for name, value in self.tensors.items():
            if not np.all(np.isfinite(value)):
                raise ad.NonFiniteValueError(f"parameter '{name}' is not finite")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams({name: value.copy() for name, value in self.items()})

    @property
    def num_values(self) -> int:
        return int(sum(value.size for value in self.tensors.values()))

    def watch(self, tape: ad.GradientTape) -> Dict[str, Tensor]:
        """Register every parameter as a leaf on ``tape``."""
        return {name: tape.watch(value) for name, value in self.items()}

    def constants(self) -> Dict[str, Tensor]:
        return {name: Tensor._wrap(value) for name, value in self.items()}

    def validate(self, spec: ModelSpec) -> None:
        layout = parameter_layout(spec)
        if set(layout) != set(self.tensors):
            missing = sorted(set(layout) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(layout))
            raise SpecMismatchError(
                f"parameters do not match spec: missing={missing}, extra={extra}"
            )
        for name, info in layout.items():
            if self.tensors[name].shape != info.shape:
                raise SpecMismatchError(
                    f"parameter '{name}' has shape {self.tensors[name].shape}, "
                    f"spec requires {info.shape}"
                )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ModelParams:
    """
    Initialize parameters.

    Weights are drawn from uniform(-a, a) with a = sqrt(1 / fan_in); biases are
    zero except the LSTM forget gate, which starts at one.
    """
    tensors = {}
    for name, info in parameter_layout(spec).items():
        if info.fan_in is None:
            tensors[name] = np.zeros(info.shape)
        else:
            bound = np.sqrt(1.0 / info.fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=info.shape)
    if spec.kind == "lstm":
        for layer, hidden in enumerate(spec.hidden_sizes):
            tensors[f"lstm{layer}.b"][hidden : 2 * hidden] = 1.0
    return ModelParams(tensors)


@dataclass
class HiddenState:
    """Per-layer recurrent state; ``c`` is only used by the LSTM."""

    h: List[Tensor]
    c: Optional[List[Tensor]] = None


def initial_state(spec: ModelSpec, batch_size: int = 1) -> Optional[HiddenState]:
    if not spec.is_recurrent:
        return None
    h = [Tensor._wrap(np.zeros((batch_size, size))) for size in spec.hidden_sizes]
    if spec.kind == "lstm":
        c = [Tensor._wrap(np.zeros((batch_size, size))) for size in spec.hidden_sizes]
        return HiddenState(h, c)
    return HiddenState(h)


def _as_batch(x: Tensor, trailing_dims: int) -> Tuple[Tensor, bool]:
    if x.data.ndim == trailing_dims:
        return ad.reshape(x, (1, *x.shape)), True
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return ad.index(y, 0) if squeeze else y


def _readout(
    params: Mapping[str, Tensor],
    features: Tensor,
    x: Tensor,
    spec: ModelSpec,
    training: bool,
    rng: Optional[np.random.Generator],
) -> Tensor:
    """Linear readout; with skip_connection the y_{t-1} part of the cell input is added."""
    features = ad.dropout(features, spec.dropout_p, training, rng)
    y = ad.linear(features, params["readout.weight"], params["readout.bias"])
    if spec.skip_connection:
        y = y + ad.index(x, (slice(None), slice(0, spec.output_dim)))
    return y


def _check_window(window: Tensor, spec: ModelSpec) -> None:
    if window.shape[-2:] != (spec.window_length, spec.feature_dim):
        raise SpecMismatchError(
            f"window shape {window.shape} does not match "
            f"(L={spec.window_length}, features={spec.feature_dim})"
        )


def mlp_forward(
    params: Mapping[str, Tensor],
    spec: ModelSpec,
    window: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Flatten an (L, features) window and apply the dense stack."""
    window = ad.as_tensor(window)
    _check_window(window, spec)
    window, squeeze = _as_batch(window, 2)
    batch = window.shape[0]

    x = ad.reshape(window, (batch, spec.window_length * spec.feature_dim))
    layers = len(spec.hidden_sizes) + 1
    for layer in range(layers):
        x = ad.linear(x, params[f"dense{layer}.weight"], params[f"dense{layer}.bias"])
        if layer < layers - 1:
            x = ad.activation(x, spec.activation)
            x = ad.dropout(x, spec.dropout_p, training, rng)
    if spec.skip_connection:
        x = x + ad.index(window, (slice(None), -1, slice(0, spec.output_dim)))
    return _unbatch(x, squeeze)


def rnn_cell(
    params: Mapping[str, Tensor],
    spec: ModelSpec,
    x_prev: Tensor,
    state: HiddenState,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[HiddenState, Tensor]:
    """h_t = σ(W1 h_{t-1} + W2 x_{t-1} + b1); y_t = W3 h_t + b2 (linear readout)."""
    x, squeeze = _as_batch(ad.as_tensor(x_prev), 1)
    layer_input = x
    new_h = []
    for layer, h_prev in enumerate(state.h):
        h_prev, _ = _as_batch(h_prev, 1)
        pre = ad.linear(h_prev, params[f"rnn{layer}.W1"]) + ad.linear(
            layer_input, params[f"rnn{layer}.W2"], params[f"rnn{layer}.b1"]
        )
        h = ad.activation(pre, spec.activation)
        new_h.append(h)
        layer_input = h
    y = _readout(params, layer_input, x, spec, training, rng)
    return HiddenState(new_h), _unbatch(y, squeeze)


def lstm_cell(
    params: Mapping[str, Tensor],
    spec: ModelSpec,
    x_prev: Tensor,
    state: HiddenState,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[HiddenState, Tensor]:
    """Standard LSTM with input, forget, cell-candidate and output gates."""
    x, squeeze = _as_batch(ad.as_tensor(x_prev), 1)
    layer_input = x
    new_h, new_c = [], []
    for layer, (h_prev, c_prev) in enumerate(zip(state.h, state.c)):
        hidden = spec.hidden_sizes[layer]
        h_prev, _ = _as_batch(h_prev, 1)
        c_prev, _ = _as_batch(c_prev, 1)
        z = ad.linear(
            layer_input, params[f"lstm{layer}.W"], params[f"lstm{layer}.b"]
        ) + ad.linear(h_prev, params[f"lstm{layer}.U"])
        i = ad.sigmoid(z[:, :hidden])
        f = ad.sigmoid(z[:, hidden : 2 * hidden])
        g = ad.tanh(z[:, 2 * hidden : 3 * hidden])
        o = ad.sigmoid(z[:, 3 * hidden :])
        c = f * c_prev + i * g
        h = o * ad.tanh(c)
        new_h.append(h)
        new_c.append(c)
        layer_input = h
    y = _readout(params, layer_input, x, spec, training, rng)
    return HiddenState(new_h, new_c), _unbatch(y, squeeze)


def gru_cell(
    params: Mapping[str, Tensor],
    spec: ModelSpec,
    x_prev: Tensor,
    state: HiddenState,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[HiddenState, Tensor]:
    """GRU with reset gate r, update gate z and h = z*h_prev + (1-z)*candidate."""
    x, squeeze = _as_batch(ad.as_tensor(x_prev), 1)
    layer_input = x
    new_h = []
    for layer, h_prev in enumerate(state.h):
        hidden = spec.hidden_sizes[layer]
        h_prev, _ = _as_batch(h_prev, 1)
        from_input = ad.linear(
            layer_input, params[f"gru{layer}.W"], params[f"gru{layer}.b"]
        )
        from_state = ad.linear(h_prev, params[f"gru{layer}.U_gates"])
        r = ad.sigmoid(from_input[:, :hidden] + from_state[:, :hidden])
        z = ad.sigmoid(
            from_input[:, hidden : 2 * hidden] + from_state[:, hidden : 2 * hidden]
        )
        candidate = ad.tanh(
            from_input[:, 2 * hidden :]
            + ad.linear(r * h_prev, params[f"gru{layer}.U_cand"])
        )
        h = z * h_prev + (1.0 - z) * candidate
        new_h.append(h)
        layer_input = h
    y = _readout(params, layer_input, x, spec, training, rng)
    return HiddenState(new_h), _unbatch(y, squeeze)


RECURRENT_CELLS = {"rnn": rnn_cell, "lstm": lstm_cell, "gru": gru_cell}


def tcn_forward(
    params: Mapping[str, Tensor],
    spec: ModelSpec,
    window: Tensor,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Residual stack of causal dilated convolutions read out at the last step."""
    window = ad.as_tensor(window)
    _check_window(window, spec)
    window, squeeze = _as_batch(window, 2)

    x = ad.transpose(window, (0, 2, 1))
    for layer, (size, dilation) in enumerate(
        zip(spec.hidden_sizes, spec.tcn_dilations)
    ):
        conv = ad.causal_dilated_conv1d(x, params[f"tcn{layer}.kernel"], dilation)
        conv = conv + ad.reshape(params[f"tcn{layer}.bias"], (size, 1))
        out = ad.activation(conv, spec.activation)
        out = ad.dropout(out, spec.dropout_p, training, rng)
        downsample = params.get(f"tcn{layer}.downsample")
        residual = x if downsample is None else ad.causal_dilated_conv1d(x, downsample)
        x = out + residual

    last = x[:, :, -1]
    y = ad.linear(last, params["readout.weight"], params["readout.bias"])
    if spec.skip_connection:
        y = y + ad.index(window, (slice(None), -1, slice(0, spec.output_dim)))
    return _unbatch(y, squeeze)


FEEDFORWARD_FORWARDS = {"mlp": mlp_forward, "tcn": tcn_forward}


class OneStepPredictor:
    """
    Uniform facade over all kinds: feed (y_k, u_k), get the prediction of y_{k+1}.

    Feedforward kinds keep a queue of the last L feature rows; recurrent kinds
    advance their hidden state. Inputs are row-batched tensors of shape
    (batch, output_dim) and (batch, input_dim).
    """

    def __init__(
        self,
        spec: ModelSpec,
        params: Mapping[str, Tensor],
        batch_size: int = 1,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ):
        missing = set(parameter_layout(spec)) - set(params)
        if missing:
            raise SpecMismatchError(f"uninitialized parameters: {sorted(missing)}")
        self.spec = spec
        self.params = params
        self.batch_size = batch_size
        self.training = training
        self.rng = rng
        self.reset()

    def reset(self) -> None:
        self.window: List[Tensor] = []
        self.state = initial_state(self.spec, self.batch_size)
        self.seen = 0

    def _row(self, y_k, u_k) -> Tensor:
        y_k, u_k = ad.as_tensor(y_k), ad.as_tensor(u_k)
        if y_k.shape[-1] != self.spec.output_dim or u_k.shape[-1] != self.spec.input_dim:
            raise SpecMismatchError(
                f"sample dims y={y_k.shape}, u={u_k.shape} do not match spec "
                f"(output_dim={self.spec.output_dim}, input_dim={self.spec.input_dim})"
            )
        return ad.concat([y_k, u_k], axis=-1)

    def push(self, y_k, u_k) -> Optional[Tensor]:
        """Consume one sample; returns the prediction when one is available."""
        row = self._row(y_k, u_k)
        self.seen += 1
        if self.spec.is_recurrent:
            cell = RECURRENT_CELLS[self.spec.kind]
            self.state, y_next = cell(
                self.params, self.spec, row, self.state, self.training, self.rng
            )
            return y_next
        self.window.append(row)
        if len(self.window) > self.spec.window_length:
            self.window.pop(0)
        return None

    def step(self, y_k, u_k) -> Tensor:
        """Consume (y_k, u_k) and return the prediction of y_{k+1}."""
        y_next = self.push(y_k, u_k)
        if y_next is not None:
            return y_next
        return self.predict()

    def predict(self) -> Tensor:
        """Prediction from the current window (feedforward kinds)."""
        if self.spec.is_recurrent:
            raise RuntimeError("recurrent predictors predict inside push()")
        if len(self.window) < self.spec.window_length:
            raise WindowUnderfullError(len(self.window), self.spec.window_length)
        forward = FEEDFORWARD_FORWARDS[self.spec.kind]
        return forward(
            self.params,
            self.spec,
            ad.stack(self.window, axis=1),
            self.training,
            self.rng,
        )


def predict_one_step(predictor: OneStepPredictor, u_k, y_k) -> Tensor:
    """Advance ``predictor`` by one sample and return ŷ_{k+1}."""
    return predictor.step(y_k, u_k)


def save_checkpoint(
    path: Union[str, Path],
    spec: ModelSpec,
    params: ModelParams,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a versioned ``.npz`` checkpoint.

    The container holds one array per parameter plus a JSON ``__meta__`` entry
    with the format version, the spec and caller metadata. Loading needs no
    pickle and reproduces every value bit for bit.
    """
    params.validate(spec)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec.model_dump(),
        "parameters": params.names(),
        "metadata": metadata or {},
    }
    with open(path, "wb") as handle:
        np.savez(handle, **{_META_KEY: np.array(json.dumps(meta))}, **params.tensors)
    logger.info(f"Saved {spec.kind} checkpoint with {params.num_values} values to {path}")
    return path


def load_checkpoint(
    path: Union[str, Path],
) -> Tuple[ModelSpec, ModelParams, Dict[str, Any]]:
    """Read a checkpoint written by ``save_checkpoint``."""
    with np.load(Path(path), allow_pickle=False) as archive:
        if _META_KEY not in archive.files:
            raise SpecMismatchError(f"{path} is not a simtrain checkpoint")
        meta = json.loads(str(archive[_META_KEY]))
        version = meta.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise SpecMismatchError(
                f"unsupported checkpoint format version {version} in {path}"
            )
        spec = ModelSpec.model_validate(meta["spec"])
        params = ModelParams({name: archive[name] for name in meta["parameters"]})
    params.validate(spec)
    return spec, params, meta.get("metadata", {})
