"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A ``GradientTape`` records every operation whose inputs are tracked. Parameters
enter the tape through ``GradientTape.watch``; operations on untracked tensors
compute plain numpy values and record nothing, so the same network code serves
training (on a tape) and inference (off the tape).
"""

import logging
from dataclasses import dataclass
from typing import (
    Callable,
    Dict,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "sigmoid", "relu", "identity")

VectorJacobian = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, shapes: Sequence[Tuple[int, ...]] = ()):
        super().__init__(message)
        self.shapes = tuple(shapes)


class TapeError(RuntimeError):
    """Raised when a backward pass is requested on an invalid loss."""


class NonFiniteValueError(ValueError):
    """Raised when external data contains NaN or Inf."""


@dataclass(frozen=True)
class Node:
    """One recorded operation; leaves have no vector-Jacobian product."""

    kind: str
    inputs: Tuple[Optional[int], ...]
    vjp: Optional[VectorJacobian]


class Tensor:
    """Dense float64 array, optionally tracked on a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "tape")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        *,
        tape: Optional["GradientTape"] = None,
        node_id: Optional[int] = None,
        check_finite: bool = True,
    ):
        data = np.array(values, dtype=np.float64)
        if check_finite and not np.all(np.isfinite(data)):
            raise NonFiniteValueError("tensor values must be finite (found NaN/Inf)")
        self.data = data
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def _wrap(
        cls,
        data: np.ndarray,
        tape: Optional["GradientTape"] = None,
        node_id: Optional[int] = None,
    ) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = data
        tensor.requires_grad = tape is not None
        tensor.tape = tape
        tensor.node_id = node_id
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None and self.node_id is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(
                f"item() needs a single element, got shape {self.shape}", [self.shape]
            )
        return float(self.data.reshape(-1)[0])

    def __float__(self) -> float:
        return self.item()

    def __repr__(self):
        return f"<Tensor(shape={self.shape}, tracked={self.tracked})>"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class GradientTape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        return False

    def watch(self, values) -> Tensor:
        """Register a leaf (a parameter) and return its tracked tensor."""
        data = values.data if isinstance(values, Tensor) else values
        data = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NonFiniteValueError("watched values must be finite")
        self.nodes.append(Node("leaf", (), None))
        return Tensor._wrap(data, self, len(self.nodes) - 1)

    def record(
        self, kind: str, inputs: Sequence[Tensor], vjp: VectorJacobian
    ) -> Tuple[Optional[int], ...]:
        input_ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.nodes.append(Node(kind, input_ids, vjp))
        return input_ids

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Reverse sweep from a scalar loss.

        Args:
            loss: Scalar tensor recorded on this tape

        Returns:
            Gradients of the loss keyed by leaf node id
        """
        if loss.tape is not self or loss.node_id is None:
            raise TapeError("loss is detached from this gradient tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")

        grads: List[Optional[np.ndarray]] = [None] * (loss.node_id + 1)
        grads[loss.node_id] = np.ones_like(loss.data)
        for position in range(loss.node_id, -1, -1):
            upstream = grads[position]
            node = self.nodes[position]
            if upstream is None or node.vjp is None:
                continue
            for input_id, input_grad in zip(node.inputs, node.vjp(upstream)):
                if input_id is None or input_grad is None:
                    continue
                # never accumulate in place: vjps may return aliases of upstream
                previous = grads[input_id]
                grads[input_id] = (
                    input_grad if previous is None else previous + input_grad
                )

        return {
            position: grad
            for position, grad in enumerate(grads)
            if grad is not None and self.nodes[position].vjp is None
        }

    def gradient(
        self, loss: Tensor, sources: Mapping[str, Tensor]
    ) -> Dict[str, np.ndarray]:
        """Gradients of the loss for named leaves; unreached leaves get zeros."""
        by_node = self.backward(loss)
        result = {}
        for name, source in sources.items():
            if source.tape is not self:
                raise TapeError(f"source '{name}' is not watched by this tape")
            grad = by_node.get(source.node_id)
            result[name] = np.zeros_like(source.data) if grad is None else grad
        return result


def as_tensor(value) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _active_tape(*tensors: Tensor) -> Optional[GradientTape]:
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is not None and tensor.tape is not tape:
            raise TapeError("operands are recorded on different gradient tapes")
        tape = tensor.tape
    return tape


def _result(
    kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: VectorJacobian
) -> Tensor:
    tape = _active_tape(*inputs)
    if tape is None:
        return Tensor._wrap(data)
    tape.record(kind, inputs, vjp)
    return Tensor._wrap(data, tape, len(tape.nodes) - 1)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(
            f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}",
            [a.shape, b.shape],
        ) from e


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), vjp)


def matmul(a, b) -> Tensor:
    """Matrix product of ``a`` (m×k) and ``b`` (k×n)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {a.shape} x {b.shape}", [a.shape, b.shape]
        )

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), vjp)


def linear(x, weight, bias=None) -> Tensor:
    """Row-batched affine map ``x @ weight.T + bias``; weight is (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.data.ndim != 2 or x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear shape mismatch: input {x.shape}, weight {weight.shape}",
            [x.shape, weight.shape],
        )
    out = x.data @ weight.data.T
    if bias is None:

        def vjp(g):
            return g @ weight.data, g.T @ x.data

        return _result("linear", out, (x, weight), vjp)

    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"linear bias shape {bias.shape} does not match weight {weight.shape}",
            [bias.shape, weight.shape],
        )

    def vjp_with_bias(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _result("linear", out + bias.data, (x, weight, bias), vjp_with_bias)


def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(x.data, axes), (x,), vjp)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    original = x.shape

    def vjp(g):
        return (g.reshape(original),)

    return _result("reshape", x.data.reshape(tuple(shape)), (x,), vjp)


def index(x, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _result("index", x.data[key], (x,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", data, tensors, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result("stack", data, tensors, vjp)


def total(x) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    x = as_tensor(x)

    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.asarray(x.data.sum()), (x,), vjp)


def mean(x) -> Tensor:
    x = as_tensor(x)
    count = x.data.size

    def vjp(g):
        return (np.full(x.shape, float(g) / count),)

    return _result("mean", np.asarray(x.data.mean()), (x,), vjp)


def square(x) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        return (2.0 * x.data * g,)

    return _result("square", x.data * x.data, (x,), vjp)


def mse(prediction, target) -> Tensor:
    """Mean squared error over every element."""
    prediction, target = as_tensor(prediction), as_tensor(target)
    if prediction.shape != target.shape:
        raise DimensionError(
            f"mse shape mismatch: prediction {prediction.shape}, "
            f"target {target.shape}",
            [prediction.shape, target.shape],
        )
    residual = prediction.data - target.data
    count = residual.size

    def vjp(g):
        scaled = (2.0 * float(g) / count) * residual
        return scaled, -scaled

    return _result(
        "mse", np.asarray(np.mean(residual * residual)), (prediction, target), vjp
    )


def activation(x, kind: str) -> Tensor:
    """Elementwise tanh, sigmoid, relu or identity."""
    x = as_tensor(x)
    if kind == "identity":
        return x
    if kind == "tanh":
        out = np.tanh(x.data)

        def vjp(g):
            return (g * (1.0 - out * out),)

    elif kind == "sigmoid":
        # tanh form is overflow-free and gives exactly 0.5 at zero
        out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

        def vjp(g):
            return (g * out * (1.0 - out),)

    elif kind == "relu":
        positive = x.data > 0.0
        out = np.where(positive, x.data, 0.0)

        def vjp(g):
            return (g * positive,)

    else:
        raise ValueError(
            f"unsupported activation '{kind}', expected one of {ACTIVATIONS}"
        )
    return _result(kind, out, (x,), vjp)


def tanh(x) -> Tensor:
    return activation(x, "tanh")


def sigmoid(x) -> Tensor:
    return activation(x, "sigmoid")


def causal_dilated_conv1d(x, kernel, dilation: int = 1) -> Tensor:
    """
    Causal dilated 1-D convolution with left zero-padding.

    Args:
        x: Input of shape (channels, time) or (batch, channels, time)
        kernel: Weights of shape (out_channels, in_channels, width); the last tap
            is aligned with the current time step
        dilation: Spacing between taps (>= 1)

    Returns:
        Output of shape (out_channels, time) or (batch, out_channels, time)
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if kernel.data.ndim != 3 or kernel.shape[2] < 1:
        raise DimensionError(
            f"kernel must be (out, in, width), got {kernel.shape}", [kernel.shape]
        )
    unbatched = x.data.ndim == 2
    signal = x.data[None] if unbatched else x.data
    if signal.ndim != 3:
        raise DimensionError(
            f"conv input must be (channels, time) or (batch, channels, time), "
            f"got {x.shape}",
            [x.shape],
        )
    out_channels, in_channels, width = kernel.shape
    if signal.shape[1] != in_channels:
        raise DimensionError(
            f"channel mismatch: input {x.shape} has {signal.shape[1]} channels, "
            f"kernel {kernel.shape} expects {in_channels}",
            [x.shape, kernel.shape],
        )

    steps = signal.shape[2]
    pad = (width - 1) * dilation
    padded = np.pad(signal, ((0, 0), (0, 0), (pad, 0)))
    out = np.zeros((signal.shape[0], out_channels, steps))
    for tap in range(width):
        window = padded[:, :, tap * dilation : tap * dilation + steps]
        out += np.einsum("oc,bct->bot", kernel.data[:, :, tap], window)

    def vjp(g):
        g3 = g[None] if unbatched else g
        grad_kernel = np.zeros_like(kernel.data)
        grad_padded = np.zeros_like(padded)
        for tap in range(width):
            start = tap * dilation
            window = padded[:, :, start : start + steps]
            grad_kernel[:, :, tap] = np.einsum("bot,bct->oc", g3, window)
            grad_padded[:, :, start : start + steps] += np.einsum(
                "oc,bot->bct", kernel.data[:, :, tap], g3
            )
        grad_x = grad_padded[:, :, pad:]
        return (grad_x[0] if unbatched else grad_x), grad_kernel

    return _result("conv1d", out[0] if unbatched else out, (x, kernel), vjp)


def dropout(
    x, p: float, training: bool, rng: Optional[np.random.Generator] = None
) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) while training."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor._wrap(mask))


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Run the reverse sweep on the tape that recorded ``loss``."""
    if loss.tape is None:
        raise TapeError("loss is detached from any gradient tape")
    return loss.tape.backward(loss)


def finite_difference_gradient(
    f: Callable[[Tensor], Union[Tensor, float]], x, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, element by element."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for position in range(base.size):
        shifted = base.copy().reshape(-1)
        shifted[position] += eps
        upper = float(f(Tensor._wrap(shifted.reshape(base.shape))))
        shifted[position] -= 2.0 * eps
        lower = float(f(Tensor._wrap(shifted.reshape(base.shape))))
        flat[position] = (upper - lower) / (2.0 * eps)
    return grad
