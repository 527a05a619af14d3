"""Compare tape gradients with central finite differences

Used by the test suite for every differentiable operation. The function under
test must be deterministic: any random draws have to come from an Rng created
inside the function so that every evaluation sees the same values.
"""

from typing import Callable, List, Sequence

import numpy as np

from matnet import tensor
from matnet.tensor import Tape, Tensor


def analytic_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of the scalar fn() w.r.t. inputs from one backward pass

    Inputs fn() does not depend on get a zero gradient.
    """
    with Tape() as tape:
        out = fn()
    grads = tape.backward(out)
    return [grads.get(t, np.zeros_like(t.data)) for t in inputs]


def numeric_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> List[np.ndarray]:
    """Central finite differences (f(x+eps) - f(x-eps)) / 2eps per element"""
    result = []
    with tensor.suspended():
        for t in inputs:
            grad = np.zeros_like(t.data)
            for idx in np.ndindex(*t.shape):
                orig = t.data[idx]
                t.data[idx] = orig + eps
                upper = fn().item()
                t.data[idx] = orig - eps
                lower = fn().item()
                t.data[idx] = orig
                grad[idx] = (upper - lower) / (2 * eps)
            result.append(grad)
    return result


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """|a - n| / (|a| + |n|) with Euclidean norms, 0 if both vanish"""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Return the largest relative error over all inputs

    The inputs are converted to 64 bit and marked as requiring gradients,
    fn() is evaluated in 64 bit precision.

    :param fn: function without arguments returning a scalar tensor
    :param inputs: tensors fn() reads, perturbed in place
    :param eps: finite difference step
    """
    for t in inputs:
        t.data = np.array(t.data, dtype=np.float64)
        t.requires_grad = True
    with tensor.precision(64):
        analytic = analytic_gradients(fn, inputs)
        numeric = numeric_gradients(fn, inputs, eps)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
