"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive is a :class:`Function` subclass with a
``forward`` over numpy arrays and a ``backward`` that maps the gradient of
the output to gradients of the inputs. Applying a function while a
:class:`Tape` is active, with at least one input that requires a gradient,
appends a node to that tape. Outside a tape nothing is recorded, which is
how evaluation and finite differences run.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Any, Iterator, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

DTYPE = np.float64
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.9
LEAKY_RELU_SLOPE = 0.2

Mode = Literal["train", "infer"]
MODES = ("train", "infer")

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "mrfgat_active_tape", default=None
)


class Tensor:
    """A dense real array that can take part in a differentiation tape."""

    # Lets ``ndarray * Tensor`` fall through to ``Tensor.__rmul__``.
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.array(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=DTYPE)
        tensor.requires_grad = False
        tensor.grad = None
        tensor.node = None
        return tensor

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __add__(self, other: Any) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: Any) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Any) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Any) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Any) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: Any) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return Sum.apply(self, axis=axis)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))


class Parameter(Tensor):
    """A named learnable tensor whose gradient buffer always matches its shape."""

    def __init__(self, data: Any, name: str) -> None:
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(value: Any) -> Tensor:
    """Return ``value`` unchanged if it is a tensor, else a constant tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=DTYPE))


@dataclass
class TapeNode:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    function: "Function"
    tape: "Tape"


class Tape:
    """
    Append-only record of differentiable operations.

    Use as a context manager; operations applied inside the ``with`` block
    are recorded in execution order, so every node's operands precede it.
    """

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc_info: Any) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], function: "Function") -> None:
        node = TapeNode(output=output, inputs=inputs, function=function, tape=self)
        output.node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) from ``loss`` to every leaf it depends on."""
        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node.output), None)
            if grad is None:
                continue
            input_grads = node.function.backward(grad)
            for tensor, input_grad in zip(node.inputs, input_grads):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if tensor.node is None:
                    _accumulate_leaf(tensor, input_grad)
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + input_grad
                else:
                    pending[id(tensor)] = input_grad


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording for the duration of the block."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            raise ContractError("loss was not produced on a tape")
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    loss.node.tape.backward(loss)


class Function:
    """
    Base class for differentiable primitives.

    ``forward`` receives the input arrays and keyword options and may stash
    whatever ``backward`` needs on ``self``. ``backward`` returns one
    gradient (or ``None``) per input, each shaped like that input.
    """

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        function = cls()
        output = Tensor._wrap(function.forward(*(tensor.data for tensor in inputs), **kwargs))
        tape = _ACTIVE_TAPE.get()
        if tape is not None and any(tensor.requires_grad for tensor in inputs):
            output.requires_grad = True
            tape.record(output, inputs, function)
        return output


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as error:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from error


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (-grad,)


class Sum(Function):
    def forward(self, a: np.ndarray, axis: Optional[int] = None) -> np.ndarray:
        if axis is not None:
            axis = _normalize_axis(axis, a.shape)
        self.shape, self.axis = a.shape, axis
        return np.sum(a, axis=axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...] = ()) -> np.ndarray:
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as error:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}") from error

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (grad.reshape(self.shape),)


class Linear(Function):
    def forward(self, x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
        if (
            weight.ndim != 2
            or x.ndim < 1
            or x.shape[-1] != weight.shape[0]
            or bias.shape != (weight.shape[1],)
        ):
            raise DimensionError(
                f"linear: input shape {x.shape} does not match weight shape "
                f"{weight.shape} and bias shape {bias.shape}"
            )
        self.x, self.weight = x, weight
        return x @ weight + bias

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        c_in, c_out = self.weight.shape
        flat_x = self.x.reshape(-1, c_in)
        flat_grad = grad.reshape(-1, c_out)
        return grad @ self.weight.T, flat_x.T @ flat_grad, flat_grad.sum(axis=0)


class LeakyReLU(Function):
    def forward(self, x: np.ndarray, slope: float = LEAKY_RELU_SLOPE) -> np.ndarray:
        self.mask = x >= 0
        self.slope = slope
        return np.where(self.mask, x, slope * x)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.where(self.mask, grad, self.slope * grad),)


class ReLU(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.where(self.mask, grad, 0.0),)


class SoftmaxLast(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 0 or x.shape[-1] < 1:
            raise DimensionError(f"softmax_last needs a non-empty last axis, got shape {x.shape}")
        shifted = np.exp(x - x.max(axis=-1, keepdims=True))
        self.y = shifted / shifted.sum(axis=-1, keepdims=True)
        return self.y

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        y = self.y
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class BatchNorm(Function):
    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        mean: Optional[np.ndarray] = None,
        var: Optional[np.ndarray] = None,
        eps: float = BATCH_NORM_EPS,
        batch_stats: bool = True,
    ) -> np.ndarray:
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean) * self.inv_std
        self.gamma = gamma
        self.batch_stats = batch_stats
        return gamma * self.x_hat + beta

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        channels = self.gamma.shape[0]
        flat_grad = grad.reshape(-1, channels)
        flat_x_hat = self.x_hat.reshape(-1, channels)
        d_gamma = (flat_grad * flat_x_hat).sum(axis=0)
        d_beta = flat_grad.sum(axis=0)
        d_x_hat = flat_grad * self.gamma
        if not self.batch_stats:
            return (d_x_hat * self.inv_std).reshape(grad.shape), d_gamma, d_beta
        rows = flat_grad.shape[0]
        d_x = (self.inv_std / rows) * (
            rows * d_x_hat
            - d_x_hat.sum(axis=0)
            - flat_x_hat * (d_x_hat * flat_x_hat).sum(axis=0)
        )
        return d_x.reshape(grad.shape), d_gamma, d_beta


class MaxAxis(Function):
    def forward(self, x: np.ndarray, axis: int = -1) -> np.ndarray:
        axis = _normalize_axis(axis, x.shape)
        if x.shape[axis] == 0:
            raise DimensionError(f"cannot take a max over empty axis {axis} of shape {x.shape}")
        self.shape, self.axis = x.shape, axis
        # argmax returns the first maximal index, which fixes the tie rule.
        self.argmax = np.expand_dims(np.argmax(x, axis=axis), axis)
        return np.take_along_axis(x, self.argmax, axis=axis).squeeze(axis)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        d_x = np.zeros(self.shape, dtype=DTYPE)
        np.put_along_axis(d_x, self.argmax, np.expand_dims(grad, self.axis), axis=self.axis)
        return (d_x,)


class ConcatLast(Function):
    def forward(self, *parts: np.ndarray) -> np.ndarray:
        if not parts:
            raise DimensionError("concat_last needs at least one part")
        leading = parts[0].shape[:-1]
        for part in parts:
            if part.ndim == 0 or part.shape[:-1] != leading:
                raise DimensionError(
                    "concat_last parts disagree on leading extents: "
                    + ", ".join(str(p.shape) for p in parts)
                )
        self.bounds = np.cumsum([0] + [part.shape[-1] for part in parts])
        return np.concatenate(parts, axis=-1)

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(
            grad[..., start:stop] for start, stop in zip(self.bounds[:-1], self.bounds[1:])
        )


class SliceLast(Function):
    def forward(self, x: np.ndarray, start: int = 0, stop: int = 0) -> np.ndarray:
        if x.ndim == 0 or not 0 <= start <= stop <= x.shape[-1]:
            raise DimensionError(f"slice [{start}:{stop}] out of range for shape {x.shape}")
        self.shape, self.start, self.stop = x.shape, start, stop
        return x[..., start:stop]

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        d_x = np.zeros(self.shape, dtype=DTYPE)
        d_x[..., self.start:self.stop] = grad
        return (d_x,)


class CrossEntropyWithLogits(Function):
    def forward(self, logits: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
        batch = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(log_probs)
        self.labels = labels
        return np.asarray(-log_probs[np.arange(batch), labels].mean())

    def backward(self, grad: np.ndarray) -> Tuple[np.ndarray]:
        batch = self.probs.shape[0]
        d_logits = self.probs.copy()
        d_logits[np.arange(batch), self.labels] -= 1.0
        return (d_logits * (grad / batch),)


def _normalize_axis(axis: int, shape: Tuple[int, ...]) -> int:
    if not -len(shape) <= axis < len(shape):
        raise DimensionError(f"axis {axis} is out of range for shape {shape}")
    return axis % len(shape)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis: ``x @ weight + bias``."""
    return Linear.apply(x, weight, bias)


def leaky_relu(x: Tensor, slope: float = LEAKY_RELU_SLOPE) -> Tensor:
    """Elementwise ``max(x, slope*x)``; derivative ``slope`` below zero, 1 from zero up."""
    if not 0.0 < slope < 1.0:
        raise ValidationError(f"leaky ReLU slope must lie in (0, 1), got {slope}")
    return LeakyReLU.apply(x, slope=slope)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(x, 0)``; derivative 0 at exactly zero."""
    return ReLU.apply(x)


def softmax_last(x: Tensor) -> Tensor:
    """Max-shifted softmax over the last axis."""
    return SoftmaxLast.apply(x)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BATCH_NORM_MOMENTUM
    eps: float = BATCH_NORM_EPS

    @classmethod
    def fresh(cls, channels: int) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
        )

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
        self.running_var = self.momentum * self.running_var + (1.0 - self.momentum) * var


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: Mode,
) -> Tensor:
    """
    Per-channel normalisation over every non-channel position.

    In ``train`` mode the batch mean and biased variance normalise ``x`` and
    are folded into ``state`` by exponential moving average. In ``infer``
    mode the running statistics are used and ``state`` is left untouched.
    """
    channels = gamma.shape[0] if gamma.ndim == 1 else -1
    if channels < 0 or beta.shape != gamma.shape or x.ndim < 1 or x.shape[-1] != channels:
        raise DimensionError(
            f"batch_norm: input shape {x.shape} does not match gamma shape "
            f"{gamma.shape} and beta shape {beta.shape}"
        )
    if mode == "train":
        flat = x.data.reshape(-1, channels)
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        state.update(mean, var)
        return BatchNorm.apply(x, gamma, beta, mean=mean, var=var, eps=state.eps, batch_stats=True)
    if mode == "infer":
        return BatchNorm.apply(
            x,
            gamma,
            beta,
            mean=state.running_mean,
            var=state.running_var,
            eps=state.eps,
            batch_stats=False,
        )
    raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")


def reduce_max_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum over ``axis``; the gradient goes to the first maximal entry."""
    return MaxAxis.apply(x, axis=axis)


def reduce_sum_axis(x: Tensor, axis: int) -> Tensor:
    return Sum.apply(x, axis=axis)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis, keeping part order."""
    if len(parts) == 1:
        return parts[0]
    return ConcatLast.apply(*parts)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    return SliceLast.apply(x, start=start, stop=stop)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def cross_entropy_with_logits(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, c]`` against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got shape {logits.shape}")
    label_array = np.asarray(labels)
    batch, classes = logits.shape
    if label_array.shape != (batch,):
        raise DimensionError(f"expected {batch} labels, got shape {label_array.shape}")
    if label_array.size and not np.issubdtype(label_array.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {label_array.dtype}")
    if label_array.size and (label_array.min() < 0 or label_array.max() >= classes):
        raise ValidationError(f"labels must lie in [0, {classes}), got {label_array.tolist()}")
    return CrossEntropyWithLogits.apply(logits, labels=label_array.astype(np.int64))


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: keep each entry with ``keep_prob`` and rescale."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValidationError(f"keep probability must lie in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return x
    mask = (rng.random(x.shape) < keep_prob) / keep_prob
    return x * Tensor._wrap(mask)
