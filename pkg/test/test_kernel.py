""" Tests for part/kernel """
import threading
from typing import Callable, List

import numpy as np
import pytest

from part import kernel
from part.errors import ConfigurationError, NumericError, ShapeError
from part.kernel import LayerNorm, Linear, Module, Parameter, Tape, Tensor
from part.kernel.tensor import _result


def _weights(shape: tuple, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=shape)


def _check(build: Callable[[List[Parameter]], Tensor], params: List[Parameter]) -> float:
    return kernel.grad_check(lambda: build(params), params, step=1e-5)


# fmt: off
@pytest.mark.parametrize(
    "op",
    [lambda x: kernel.gelu(x),
     lambda x: kernel.row_softmax(x),
     lambda x: kernel.scale(x, -2.5),
     lambda x: kernel.transpose(x, (1, 0)),
     lambda x: kernel.reshape(x, (5, 4)),
     lambda x: kernel.narrow(x, 1, 1, 4),
     lambda x: kernel.take_rows(x, np.array([3, 0, 0, 2])),
     lambda x: kernel.concat([x, kernel.scale(x, 2.0)], axis=0)]
)
# fmt: on
def test_unary_gradients(op: Callable[[Tensor], Tensor]) -> None:
    """Test that unary operations pass a finite-difference check in isolation."""
    x = Parameter(_weights((4, 5)))

    def loss(params: List[Parameter]) -> Tensor:
        out = op(params[0])
        return kernel.total(kernel.mul(out, _weights(out.shape, 1)))

    assert _check(loss, [x]) <= 1e-6


def test_binary_gradients() -> None:
    """Test broadcasting add, sub and mul against finite differences."""
    a, b = Parameter(_weights((3, 4))), Parameter(_weights((4,), 2))

    def loss(params: List[Parameter]) -> Tensor:
        out = kernel.mul(kernel.add(params[0], params[1]), kernel.sub(params[0], params[1]))
        return kernel.total(kernel.mul(out, _weights((3, 4), 3)))

    assert _check(loss, [a, b]) <= 1e-6


def test_matmul_and_linear_gradients() -> None:
    """Test batched matmul and the linear map against finite differences."""
    a = Parameter(_weights((2, 3, 4)))
    b = Parameter(_weights((4, 5), 1))
    bias = Parameter(_weights((5,), 2))

    def loss(params: List[Parameter]) -> Tensor:
        product = kernel.matmul(params[0], params[1])
        out = kernel.linear(params[0], params[1], params[2])
        return kernel.total(kernel.mul(kernel.add(product, out), _weights((2, 3, 5), 4)))

    assert _check(loss, [a, b, bias]) <= 1e-6


def test_layernorm_gradients() -> None:
    """Test layer normalization against finite differences."""
    x = Parameter(_weights((3, 6)))
    gain, shift = Parameter(_weights((6,), 1) + 1.0), Parameter(_weights((6,), 2))

    def loss(params: List[Parameter]) -> Tensor:
        out = kernel.layernorm(*params)
        return kernel.total(kernel.mul(out, _weights((3, 6), 3)))

    assert _check(loss, [x, gain, shift]) <= 1e-6


def test_batched_take_rows_gradients() -> None:
    """Test that batched gathers with repeated rows accumulate gradients."""
    x = Parameter(_weights((2, 4, 3)))

    def loss(params: List[Parameter]) -> Tensor:
        out = kernel.take_rows(params[0], np.array([[1, 1, 3], [0, 2, 2]]))
        return kernel.total(kernel.mul(out, _weights((2, 3, 3), 1)))

    assert _check(loss, [x]) <= 1e-6


def test_loss_gradients() -> None:
    """Test mean squared error and cross-entropy against finite differences."""
    logits = Parameter(_weights((5, 3)))
    labels = np.array([0, 2, 1, 1, 0])
    target = _weights((5, 3), 1)

    def loss(params: List[Parameter]) -> Tensor:
        return kernel.add(
            kernel.mse(params[0], target), kernel.cross_entropy(params[0], labels)
        )

    assert _check(loss, [logits]) <= 1e-6


def test_quadratic_linear_layer() -> None:
    """Test that the check of a quadratic loss is exact up to rounding."""
    layer = Linear(3, 2, np.random.default_rng(0))
    x = Tensor(_weights((6, 3), 1))
    target = _weights((6, 2), 2)
    error = kernel.grad_check(lambda: kernel.mse(layer(x), target), layer.parameters())
    assert error <= 1e-8


def test_grad_check_catches_wrong_gradient() -> None:
    """Test that a deliberately wrong backward rule is detected."""
    x = Parameter(_weights((3,)))

    def wrong_square(value: Tensor) -> Tensor:
        def backward(grad: np.ndarray) -> list:
            return [grad * value.data]

        return _result(value.data**2, (value,), backward, "wrong_square")

    error = kernel.grad_check(lambda: kernel.total(wrong_square(x)), [x])
    assert error == pytest.approx(1 / 3)


# fmt: off
@pytest.mark.parametrize(
    "step, dtype",
    [(1e-3, np.float64), (1e-7, np.float64), (1e-5, np.float32)]
)
# fmt: on
def test_grad_check_validation(step: float, dtype: type) -> None:
    """Test that bad steps and 32-bit parameters are refused."""
    x = Parameter(np.ones(3, dtype=dtype))
    with pytest.raises(ConfigurationError):
        kernel.grad_check(lambda: kernel.total(x), [x], step=step)


def test_cross_entropy_value() -> None:
    """Test that uniform logits give a loss of log(classes)."""
    loss = kernel.cross_entropy(Tensor(np.zeros((4, 3))), np.array([0, 1, 2, 0]))
    assert loss.item() == pytest.approx(np.log(3))


def test_softmax_rows_sum_to_one() -> None:
    """Test that softmax is stable for large logits."""
    out = kernel.row_softmax(Tensor(np.array([[1000.0, 1000.0], [0.0, -1000.0]])))
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)
    np.testing.assert_allclose(out.data[0], [0.5, 0.5])


def test_softmax_shift_invariance() -> None:
    """Test that adding a constant to every row leaves softmax unchanged."""
    x = _weights((6, 9))
    shift = np.random.default_rng(3).uniform(-50.0, 50.0, size=(6, 1))
    base = kernel.row_softmax(Tensor(x)).data
    moved = kernel.row_softmax(Tensor(x + shift)).data
    np.testing.assert_allclose(moved, base, rtol=0.0, atol=1e-12)


def test_constant_row_softmax() -> None:
    """Test that a constant row of length k gives 1/k everywhere."""
    out = kernel.row_softmax(Tensor(np.full((2, 5), 7.0)))
    np.testing.assert_allclose(out.data, 0.2, rtol=0.0, atol=1e-15)


def test_layernorm_moments() -> None:
    """Test that layernorm centers and scales every feature vector."""
    x = Tensor(10.0 * _weights((3, 7, 64)) + 4.0)
    features = x.shape[-1]
    out = kernel.layernorm(x, Tensor(np.ones(features)), Tensor(np.zeros(features)))
    assert np.abs(out.data.mean(axis=-1)).max() <= 1e-10
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, rtol=0.0, atol=1e-6)


# fmt: off
@pytest.mark.parametrize(
    "pred, target, expected",
    [([[1.0, 1.0]], [[0.0, 0.0]], 1.0),
     ([[2.0, -1.0]], [[2.0, -1.0]], 0.0),
     ([[2.0, 2.0]], [[0.0, 0.0]], 4.0)]
)
# fmt: on
def test_mse_value(pred: list, target: list, expected: float) -> None:
    """Test the mean squared error of small hand-evaluated pairs."""
    assert kernel.mse(Tensor(np.array(pred)), np.array(target)).item() == expected


@pytest.mark.parametrize("seed", range(5))
def test_bounded_inputs_stay_finite(seed: int) -> None:
    """Test that inputs in [-1e3, 1e3] give finite values and gradients."""
    rng = np.random.default_rng(seed)

    def bounded(*shape: int) -> Parameter:
        return Parameter(rng.uniform(-1e3, 1e3, size=shape))

    x, weight, bias = bounded(4, 8), bounded(8, 8), bounded(8)
    gain, shift, other = bounded(8), bounded(8), bounded(4, 8)
    with Tape() as tape:
        hidden = kernel.linear(x, weight, bias)
        hidden = kernel.layernorm(hidden, gain, shift)
        hidden = kernel.gelu(kernel.scale(hidden, 3.0))
        attention = kernel.row_softmax(kernel.matmul(x, kernel.transpose(other, (1, 0))))
        joined = kernel.concat_last_dim(hidden, kernel.matmul(attention, other))
        loss = kernel.mse(joined, rng.uniform(-1e3, 1e3, size=joined.shape))
    tape.backward(loss)
    assert np.isfinite(loss.item())
    for param in (x, weight, bias, gain, shift, other):
        assert np.all(np.isfinite(param.grad))


def test_tapes_are_per_thread() -> None:
    """Test that two threads with their own tapes record only their own operations."""
    entered, other_entered, done = threading.Event(), threading.Event(), threading.Event()
    weights = {"a": Parameter(np.ones((2, 3))), "b": Parameter(np.ones((2, 3)))}
    tapes = {}

    def first() -> None:
        with Tape() as tape:
            tapes["a"] = tape
            entered.set()
            other_entered.wait(5.0)
            loss = kernel.total(kernel.matmul(Tensor(np.ones((1, 2))), weights["a"]))
            tape.backward(loss)
        done.set()

    def second() -> None:
        entered.wait(5.0)
        with Tape() as tape:
            tapes["b"] = tape
            other_entered.set()
            done.wait(5.0)
            loss = kernel.total(kernel.scale(weights["b"], 2.0))
            tape.backward(loss)

    threads = [threading.Thread(target=first), threading.Thread(target=second)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join(10.0)
    assert len(tapes["a"]) == 2 and len(tapes["b"]) == 2
    np.testing.assert_array_equal(weights["a"].grad, np.ones((2, 3)))
    np.testing.assert_array_equal(weights["b"].grad, np.full((2, 3), 2.0))


def test_gradients_accumulate() -> None:
    """Test that a second backward pass adds to existing gradients."""
    x = Parameter(np.array([1.0, 2.0]))
    with Tape() as tape:
        loss = kernel.total(kernel.mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])
    kernel.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_shared_intermediate() -> None:
    """Test that a tensor used twice receives the sum of both gradients."""
    x = Parameter(np.array([3.0]))
    with Tape() as tape:
        y = kernel.scale(x, 2.0)
        loss = kernel.total(kernel.add(y, kernel.mul(y, y)))
    tape.backward(loss)
    assert x.grad[0] == pytest.approx(2.0 * (1.0 + 2 * 6.0))


def test_no_tape_records_nothing() -> None:
    """Test that operations outside a tape produce plain leaf tensors."""
    x = Parameter(np.ones(2))
    out = kernel.scale(x, 2.0)
    assert out.is_leaf and not out.requires_grad


def test_backward_needs_scalar() -> None:
    """Test that only scalar losses can be differentiated."""
    x = Parameter(np.ones(2))
    with Tape() as tape:
        out = kernel.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(out)


def test_non_finite_values() -> None:
    """Test that an operation producing NaN raises a NumericError."""
    with pytest.raises(NumericError):
        kernel.scale(Tensor(np.array([np.nan])), 1.0)


# fmt: off
@pytest.mark.parametrize(
    "op",
    [lambda: kernel.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
     lambda: kernel.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
     lambda: kernel.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))),
     lambda: kernel.reshape(Tensor(np.ones((2, 3))), (4, 2)),
     lambda: kernel.take_rows(Tensor(np.ones((2, 3))), np.array([2])),
     lambda: kernel.mse(Tensor(np.ones(3)), np.ones(4)),
     lambda: kernel.cross_entropy(Tensor(np.ones((2, 3))), np.array([0]))]
)
# fmt: on
def test_shape_errors(op: Callable[[], Tensor]) -> None:
    """Test that mismatched shapes raise a ShapeError."""
    with pytest.raises(ShapeError):
        op()


class _Stack(Module):
    def __init__(self, rng: np.random.Generator):
        self.first = Linear(3, 4, rng)
        self.norms = [LayerNorm(4), LayerNorm(4)]
        self.scale = Parameter(np.ones(1))


def test_module_parameter_names() -> None:
    """Test that parameter names follow attribute paths."""
    module = _Stack(np.random.default_rng(0))
    names = [name for name, _ in module.named_parameters()]
    assert names == [
        "first.weight",
        "first.bias",
        "norms.0.gain",
        "norms.0.shift",
        "norms.1.gain",
        "norms.1.shift",
        "scale",
    ]
    assert module.parameter_count() == 12 + 4 + 16 + 1


def test_module_state_round_trip() -> None:
    """Test that a state dict copies values between modules."""
    source = _Stack(np.random.default_rng(0))
    target = _Stack(np.random.default_rng(1))
    assert target.load_state_dict(source.state_dict()) == []
    np.testing.assert_array_equal(target.first.weight.data, source.first.weight.data)


def test_module_state_errors() -> None:
    """Test missing and mis-shaped parameters in a loaded state."""
    module = _Stack(np.random.default_rng(0))
    state = module.state_dict()
    del state["scale"]
    with pytest.raises(ShapeError):
        module.load_state_dict(state)
    assert module.load_state_dict(state, strict=False) == ["scale"]
    state["scale"] = np.ones(2)
    with pytest.raises(ShapeError):
        module.load_state_dict(state)


def test_module_freeze() -> None:
    """Test that frozen modules expose no trainable parameters."""
    module = _Stack(np.random.default_rng(0))
    module.first.freeze()
    assert len(module.trainable_parameters()) == 5


def test_trunc_normal_bounds() -> None:
    """Test that initial weights lie within two deviations of zero."""
    values = kernel.trunc_normal(np.random.default_rng(0), (200, 50))
    assert np.abs(values).max() <= 0.04
    assert values.std() == pytest.approx(0.0176, abs=0.001)
