"""
Central-difference gradient checks against the tape.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)`` with
``a`` the tape gradient and ``n`` the central difference.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Sequence

import numpy as np

from .autodiff import Parameter, Tape, Tensor, backward, no_tape
from .errors import ContractError, ValidationError

RELATIVE_ERROR_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), RELATIVE_ERROR_FLOOR)
    return np.abs(analytic - numeric) / denominator


def _scalar(loss_fn: Callable[[], Tensor]) -> float:
    with no_tape():
        out = loss_fn()
    if out.size != 1:
        raise ContractError(f"gradient check needs a scalar function, got shape {out.shape}")
    return out.item()


def _analytic_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> List[np.ndarray]:
    saved = [(tensor.requires_grad, tensor.grad) for tensor in tensors]
    for tensor in tensors:
        tensor.requires_grad = True
        tensor.grad = np.zeros_like(tensor.data)
    try:
        with Tape():
            loss = loss_fn()
            backward(loss)
        return [tensor.grad.copy() for tensor in tensors]
    finally:
        for tensor, (requires_grad, grad) in zip(tensors, saved):
            tensor.requires_grad = requires_grad
            tensor.grad = grad


def _numeric_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, eps: float) -> np.ndarray:
    # Perturbations go through a flat view, so the storage must be contiguous.
    tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    numeric = np.zeros(flat.shape, dtype=flat.dtype)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + eps
        plus = _scalar(loss_fn)
        flat[index] = original - eps
        minus = _scalar(loss_fn)
        flat[index] = original
        numeric[index] = (plus - minus) / (2.0 * eps)
    return numeric.reshape(tensor.shape)


def _check_deterministic(loss_fn: Callable[[], Tensor]) -> None:
    first = _scalar(loss_fn)
    second = _scalar(loss_fn)
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise ContractError(
            f"gradient check target is not deterministic: {first!r} then {second!r}"
        )


def tensor_errors(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    eps: float = 1e-5,
) -> List[float]:
    """Worst relative error of each tensor's tape gradient of ``loss_fn()``."""
    if eps <= 0:
        raise ValidationError(f"finite-difference step must be positive, got {eps}")
    _check_deterministic(loss_fn)
    analytic = _analytic_gradients(loss_fn, tensors)
    errors = []
    for tensor, grad in zip(tensors, analytic):
        numeric = _numeric_gradient(loss_fn, tensor, eps)
        worst = relative_error(grad, numeric).max() if grad.size else 0.0
        errors.append(float(worst))
    return errors


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences."""
    return tensor_errors(lambda: f(x), [x], eps)[0]


def parameter_errors(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> Dict[str, float]:
    """Worst relative error per parameter name."""
    errors = tensor_errors(loss_fn, params, eps)
    return {param.name: error for param, error in zip(params, errors)}


def block_errors(errors: Dict[str, float]) -> Dict[str, float]:
    """Fold per-parameter errors into blocks (the name without its last component)."""
    blocks: Dict[str, float] = {}
    for name, error in errors.items():
        block = name.rsplit(".", 1)[0]
        blocks[block] = max(blocks.get(block, 0.0), error)
    return blocks
