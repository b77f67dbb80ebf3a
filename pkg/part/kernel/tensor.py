""" Dense tensors with tape-based reverse-mode differentiation.

Every operation computes its forward value with numpy and, when a tape is active
  and one of its inputs requires a gradient, records a closure that maps the
  gradient of the output onto gradients of the inputs. `Tape.backward` replays
  those closures in exact reverse order and accumulates into leaf tensors.
"""
import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import NumericError, ShapeError

_Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
_ArrayLike = Union["Tensor", np.ndarray, float]

# Active tapes, innermost last. Each thread records onto its own stack.
_LOCAL = threading.local()


def _tapes() -> List["Tape"]:
    if not hasattr(_LOCAL, "tapes"):
        _LOCAL.tapes = []
    return _LOCAL.tapes


class Tensor:
    """A numpy array that can take part in differentiation.

    Attributes:
        data: The values. Floating point, 64-bit unless built otherwise.
        requires_grad: Whether gradients flow into this tensor.
        grad: Accumulated gradient (leaf tensors only).
        is_leaf: False for tensors produced by a recorded operation.
    """

    def __init__(self, data: _ArrayLike, requires_grad: bool = False, name: str = ""):
        array = data.data if isinstance(data, Tensor) else np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name

    def __repr__(self) -> str:
        name = self.name or hex(id(self))
        return f"<Tensor {name}: shape={self.shape}, dtype={self.dtype}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: _ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: _ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: _ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: _ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: _ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: _ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Parameter(Tensor):
    """A learnable leaf tensor with a gradient buffer of identical shape.

    The name is the dotted path of the parameter inside its module tree and is
      filled in by `Module.named_parameters`.
    """

    def __init__(self, data: _ArrayLike, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Tape:
    """Records operations while active (`with Tape() as tape: ...`)."""

    def __init__(self) -> None:
        self._records: List[Tuple[Tensor, Tuple[Tensor, ...], _Backward]] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        _tapes().remove(self)

    def __len__(self) -> int:
        return len(self._records)

    def record(
        self, output: Tensor, inputs: Tuple[Tensor, ...], backward: _Backward
    ) -> None:
        self._records.append((output, inputs, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(leaf) into every leaf tensor that requires a gradient.

        Gradients accumulate, so calling this twice without zeroing doubles them.

        Raises:
            ShapeError: If the loss is not a scalar.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss. Found shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss.is_leaf:
            if loss.requires_grad:
                _accumulate(loss, seed)
            return
        pending = {id(loss): seed}
        for output, inputs, backward in reversed(self._records):
            grad = pending.pop(id(output), None)
            if grad is None:
                continue
            for tensor, input_grad in zip(inputs, backward(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    _accumulate(tensor, input_grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + input_grad
                else:
                    pending[id(tensor)] = input_grad


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional spelling of `tape.backward(loss)`."""
    tape.backward(loss)


def as_tensor(value: _ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, with broadcast batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_a = grad @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ grad
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight + bias with weight of shape (in, out) applied along the last axis."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input shape {x.shape} does not fit weight {weight.shape}"
        )
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(
            f"linear: bias shape {bias.shape} does not fit weight {weight.shape}"
        )
    inputs: Tuple[Tensor, ...] = (x, weight) if bias is None else (x, weight, bias)
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        flat_grad = grad.reshape(-1, weight.shape[1])
        grads = [
            grad @ weight.data.T,
            x.data.reshape(-1, weight.shape[0]).T @ flat_grad,
        ]
        if bias is not None:
            grads.append(flat_grad.sum(axis=0))
        return grads

    return _result(out, inputs, backward, "linear")


def layernorm(x: Tensor, gain: Tensor, shift: Tensor, epsilon: float = 1e-6) -> Tensor:
    """Normalize every feature vector (last axis) to zero mean and unit variance,
    then apply an elementwise gain and shift.
    """
    if gain.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise ShapeError(
            f"layernorm: gain {gain.shape} and shift {shift.shape} do not fit "
            f"input {x.shape}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + epsilon)
    normalized = centered * inv_std

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_normalized = grad * gain.data
        grad_x = inv_std * (
            grad_normalized
            - grad_normalized.mean(axis=-1, keepdims=True)
            - normalized * (grad_normalized * normalized).mean(axis=-1, keepdims=True)
        )
        features = x.shape[-1]
        grad_gain = (grad * normalized).reshape(-1, features).sum(axis=0)
        grad_shift = grad.reshape(-1, features).sum(axis=0)
        return grad_x, grad_gain, grad_shift

    out = normalized * gain.data + shift.data
    return _result(out, (x, gain, shift), backward, "layernorm")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    tanh = np.tanh(inner)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return (grad * (0.5 * (1.0 + tanh) + 0.5 * x.data * (1.0 - tanh**2) * d_inner),)

    return _result(0.5 * x.data * (1.0 + tanh), (x,), backward, "gelu")


def row_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis; the row maximum is subtracted before exponentiation."""
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (out * (grad - (grad * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward, "row_softmax")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along one axis; every other axis must agree."""
    tensors = [as_tensor(tensor) for tensor in tensors]
    try:
        out = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[tensor.shape for tensor in tensors]} differ off axis {axis}"
        )
    bounds = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return np.split(grad, bounds, axis=axis)

    return _result(out, tuple(tensors), backward, "concat")


def concat_last_dim(a: Tensor, b: Tensor) -> Tensor:
    return concat([a, b], axis=-1)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * c,)

    return _result(x.data * c, (x,), backward, "scale")


def add(a: _ArrayLike, b: _ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("add", a, b, np.add)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a: _ArrayLike, b: _ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("sub", a, b, np.subtract)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _result(out, (a, b), backward, "sub")


def mul(a: _ArrayLike, b: _ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("mul", a, b, np.multiply)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}")

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad.reshape(x.shape),)

    return _result(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.transpose(grad, inverse),)

    return _result(np.transpose(x.data, axes), (x,), backward, "transpose")


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """The slice `start:stop` of one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    window = tuple(index)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros_like(x.data)
        full[window] = grad
        return (full,)

    return _result(x.data[window], (x,), backward, "narrow")


def take_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows (second to last axis).

    Args:
        x: Tensor of shape (N, F) or (B, N, F).
        index: Integer array of shape (K,) or, for batched input, (B, K) or (K,).

    Returns:
        Tensor of shape (K, F) or (B, K, F).
    """
    index = np.asarray(index, dtype=np.int64)
    if x.ndim not in (2, 3):
        raise ShapeError(f"take_rows: expected a 2D or 3D tensor. Found shape {x.shape}")
    rows = x.shape[-2]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise ShapeError(f"take_rows: index out of range for {rows} rows")
    if x.ndim == 3:
        index = np.broadcast_to(index, (x.shape[0], index.shape[-1]))
        out = np.take_along_axis(x.data, index[..., None], axis=1)
    else:
        out = x.data[index]

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros_like(x.data)
        if x.ndim == 3:
            flat = index + np.arange(x.shape[0])[:, None] * rows
            features = x.shape[-1]
            np.add.at(
                full.reshape(-1, features), flat.reshape(-1), grad.reshape(-1, features)
            )
        else:
            np.add.at(full, index, grad)
        return (full,)

    return _result(out, (x,), backward, "take_rows")


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.broadcast_to(grad, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward, "sum")


def mse(pred: Tensor, target: _ArrayLike) -> Tensor:
    """Mean over all elements of the squared difference; no gradient reaches `target`."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tuple(target_data.shape):
        raise ShapeError(
            f"mse: prediction {pred.shape} and target {target_data.shape} differ"
        )
    residual = pred.data - target_data

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * 2.0 * residual / residual.size,)

    return _result(np.asarray((residual**2).mean()), (pred,), backward, "mse")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row-softmax of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} do not fit labels {labels.shape}"
        )
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (grad * probs / labels.size,)

    loss = np.asarray(-log_probs[rows, labels].mean())
    return _result(loss, (logits,), backward, "cross_entropy")


def _result(
    data: np.ndarray, inputs: Tuple[Tensor, ...], backward: _Backward, op: str
) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    tapes = _tapes()
    if tapes and any(tensor.requires_grad for tensor in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tapes[-1].record(out, inputs, backward)
    return out


def _broadcast(op: str, a: Tensor, b: Tensor, fn: Callable) -> np.ndarray:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    return fn(a.data, b.data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.broadcast_to(grad, tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.astype(tensor.dtype, copy=True)
    else:
        tensor.grad += grad
