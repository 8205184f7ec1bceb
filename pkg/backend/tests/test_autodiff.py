"""Tests for the tensor and gradient-tape core."""

import numpy as np
import pytest
from app.core import autodiff as ad
from app.core.autodiff import GradientTape, Tensor
from app.core.rng import make_rng


def test_matmul_values():
    """Identity and a hand-computed product."""
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(eye, m).data, m.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_reports_both_shapes():
    """Inner dimension mismatch raises with both shapes."""
    with pytest.raises(ad.DimensionError) as excinfo:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert excinfo.value.shapes == ((2, 3), (4, 2))
    assert "(2, 3)" in str(excinfo.value) and "(4, 2)" in str(excinfo.value)


def test_matmul_gradient_is_ones_times_b_transpose(rng):
    """d sum(a @ b) / da = ones @ b^T."""
    a_values = rng.normal(size=(3, 4))
    b = Tensor(rng.normal(size=(4, 2)))
    with GradientTape() as tape:
        a = tape.watch(a_values)
        grads = tape.gradient(ad.total(ad.matmul(a, b)), {"a": a})
    assert np.allclose(grads["a"], np.ones((3, 2)) @ b.data.T)


def test_tensor_rejects_non_finite():
    """NaN and Inf are rejected at construction."""
    with pytest.raises(ad.NonFiniteValueError):
        Tensor([1.0, np.nan])
    with pytest.raises(ad.NonFiniteValueError):
        Tensor([np.inf])


def test_activation_values():
    """sigmoid(0)=0.5, tanh(0)=0, relu(-1)=0, identity passes through."""
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    assert ad.tanh(Tensor(0.0)).item() == 0.0
    assert ad.activation(Tensor(-1.0), "relu").item() == 0.0
    assert ad.activation(Tensor(2.5), "identity").item() == 2.5
    with pytest.raises(ValueError):
        ad.activation(Tensor(1.0), "softplus")


def test_sigmoid_gradient_matches_closed_form():
    """Gradient at x=1 equals σ(1)(1-σ(1))."""
    with GradientTape() as tape:
        x = tape.watch(np.array(1.0))
        grads = tape.gradient(ad.sigmoid(x), {"x": x})
    s = 1.0 / (1.0 + np.exp(-1.0))
    numeric = ad.finite_difference_gradient(lambda t: ad.sigmoid(t), np.array(1.0))
    assert grads["x"] == pytest.approx(s * (1 - s), rel=1e-12)
    assert numeric == pytest.approx(s * (1 - s), rel=1e-6)


def test_causal_conv_examples():
    """Width-1 identity kernel and a hand-convolved two-tap kernel."""
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    identity = ad.causal_dilated_conv1d(x, Tensor(np.ones((1, 1, 1))))
    assert np.array_equal(identity.data, x.data)
    summed = ad.causal_dilated_conv1d(x, Tensor(np.ones((1, 1, 2))), dilation=1)
    assert summed.data.tolist() == [[1.0, 3.0, 5.0, 7.0]]


def test_causal_conv_dilation_two():
    """Dilation 2 adds the sample two steps back."""
    x = Tensor([[1.0, 2.0, 3.0, 4.0]])
    out = ad.causal_dilated_conv1d(x, Tensor(np.ones((1, 1, 2))), dilation=2)
    assert out.data.tolist() == [[1.0, 2.0, 4.0, 6.0]]


def test_causal_conv_is_causal(rng):
    """Changing input at time t leaves earlier outputs untouched."""
    x = rng.normal(size=(2, 12))
    kernel = Tensor(rng.normal(size=(3, 2, 3)))
    base = ad.causal_dilated_conv1d(Tensor(x), kernel, dilation=2).data
    perturbed = x.copy()
    perturbed[:, 7] += 10.0
    changed = ad.causal_dilated_conv1d(Tensor(perturbed), kernel, dilation=2).data
    assert np.array_equal(base[:, :7], changed[:, :7])
    assert not np.array_equal(base[:, 7:], changed[:, 7:])


def test_causal_conv_channel_mismatch():
    """Kernel input channels must match the signal."""
    with pytest.raises(ad.DimensionError):
        ad.causal_dilated_conv1d(Tensor(np.zeros((2, 5))), Tensor(np.zeros((1, 3, 2))))


def test_causal_conv_gradient_matches_finite_differences(rng):
    """Kernel gradient of a dilated convolution."""
    x = Tensor(rng.normal(size=(2, 2, 6)))
    kernel_values = rng.normal(size=(2, 2, 3))

    def loss(kernel):
        return ad.total(ad.square(ad.causal_dilated_conv1d(x, kernel, dilation=2)))

    with GradientTape() as tape:
        kernel = tape.watch(kernel_values)
        grads = tape.gradient(loss(kernel), {"kernel": kernel})
    numeric = ad.finite_difference_gradient(loss, kernel_values)
    assert np.allclose(grads["kernel"], numeric, rtol=1e-6, atol=1e-8)


def test_dropout_modes(rng):
    """Identity for p=0 or inference; unbiased in training."""
    x = Tensor(rng.normal(size=(100,)))
    assert ad.dropout(x, 0.0, True, rng) is x
    assert ad.dropout(x, 0.5, False) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        ad.dropout(x, 0.5, True, None)

    ones = Tensor(np.ones(20000))
    dropped = ad.dropout(ones, 0.5, True, make_rng(0)).data
    assert set(np.unique(dropped)) <= {0.0, 2.0}
    standard_error = dropped.std() / np.sqrt(dropped.size)
    assert abs(dropped.mean() - 1.0) < 3 * standard_error


def test_backward_examples():
    """sum(W x) and (w x)^2 gradients by hand."""
    x = Tensor([[1.0], [2.0], [3.0]])
    with GradientTape() as tape:
        w = tape.watch(np.ones((2, 3)))
        grads = tape.gradient(ad.total(ad.matmul(w, x)), {"w": w})
    assert np.array_equal(grads["w"], np.ones((2, 1)) @ x.data.T)

    with GradientTape() as tape:
        w = tape.watch(np.array(2.0))
        loss = ad.square(w * 3.0)
        grads = tape.gradient(loss, {"w": w})
    assert grads["w"] == pytest.approx(36.0)


def test_backward_accumulates_over_reuse():
    """y = w + w gives grad 2."""
    with GradientTape() as tape:
        w = tape.watch(np.array(1.5))
        grads = tape.gradient(w + w, {"w": w})
    assert grads["w"] == 2.0


def test_backward_rejects_invalid_losses():
    """Non-scalar and detached losses are refused."""
    with GradientTape() as tape:
        w = tape.watch(np.ones(3))
        with pytest.raises(ad.TapeError):
            tape.backward(w * 2.0)
    with pytest.raises(ad.TapeError):
        ad.backward(Tensor(1.0))


def test_unreached_leaf_gets_zero_gradient():
    """Leaves the loss does not depend on get zeros."""
    with GradientTape() as tape:
        used = tape.watch(np.array(2.0))
        unused = tape.watch(np.ones(3))
        grads = tape.gradient(ad.square(used), {"used": used, "unused": unused})
    assert np.array_equal(grads["unused"], np.zeros(3))


def test_tape_nodes_reference_earlier_positions(rng):
    """Every recorded input id precedes its node."""
    with GradientTape() as tape:
        w = tape.watch(rng.normal(size=(3, 3)))
        h = ad.tanh(ad.matmul(w, Tensor(rng.normal(size=(3, 1)))))
        ad.mse(h, np.zeros((3, 1)))
    for position, node in enumerate(tape.nodes):
        assert all(i is None or i < position for i in node.inputs)


def test_finite_difference_gradient_examples():
    """sum gives ones; x^2 at 3 gives 6."""
    assert np.allclose(
        ad.finite_difference_gradient(lambda t: ad.total(t), np.arange(4.0)), np.ones(4)
    )
    grad = ad.finite_difference_gradient(lambda t: ad.square(t), np.array(3.0))
    assert grad == pytest.approx(6.0, abs=1e-8)
    with pytest.raises(ValueError):
        ad.finite_difference_gradient(lambda t: ad.total(t), np.ones(2), eps=0.0)


def test_broadcast_gradient_sums_back(rng):
    """A bias broadcast over a batch receives the batch sum."""
    x = Tensor(rng.normal(size=(5, 3)))
    with GradientTape() as tape:
        bias = tape.watch(np.zeros(3))
        grads = tape.gradient(ad.total(x + bias), {"bias": bias})
    assert np.array_equal(grads["bias"], np.full(3, 5.0))
