"""
Central finite-difference oracle for tape gradients.
"""

from typing import Callable, List, Sequence, Union

import numpy as np

from .exceptions import ContractError, NumericError
from .tensor import Tape, Tensor, backward, zero_grad

ABSOLUTE_FLOOR = 1e-12


def _evaluate(f: Callable, params) -> float:
    value = f(params)
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise NumericError(f"finite_difference_check: objective evaluated to {value}")
    return value


def finite_difference_check(f: Callable, params: Union[Tensor, Sequence[Tensor]], h: float = 1e-5) -> float:
    """
    Compare ``backward`` against central differences.

    Args:
        f: Deterministic function of ``params`` returning a scalar Tensor
        params: Parameter tensor, or a list of them, perturbed entry by entry
        h: Step size

    Returns:
        Largest entrywise relative error ``|a - n| / max(|a|, |n|, 1e-12)``
    """
    if h <= 0:
        raise ContractError(f"finite_difference_check: step must be positive, got {h}")
    tensors: List[Tensor] = [params] if isinstance(params, Tensor) else list(params)

    zero_grad(tensors)
    with Tape() as tape:
        root = f(params)
    if not np.isfinite(root.item()):
        raise NumericError(f"finite_difference_check: objective evaluated to {root.item()}")
    if root._node is not None:
        backward(tape, root)

    worst = 0.0
    for tensor in tensors:
        analytic = tensor.grad.reshape(-1)
        flat = tensor.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = _evaluate(f, params)
            flat[i] = original - h
            lower = _evaluate(f, params)
            flat[i] = original
            numeric = (upper - lower) / (2.0 * h)
            scale = max(abs(analytic[i]), abs(numeric), ABSOLUTE_FLOOR)
            worst = max(worst, abs(analytic[i] - numeric) / scale)
    return float(worst)
