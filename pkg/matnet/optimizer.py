"""Adaptive moment (Adam) updates with global-norm gradient clipping"""

import logging
from typing import Dict, Mapping, Optional

import numpy as np

from matnet.tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

PREFIX = "opt."  # prefix of the optimizer entries in checkpoints


class OptimState:
    """Moment accumulators and hyperparameters of the optimizer

    :param shapes: parameter name -> shape, the moments mirror them
    :param lr: learning rate
    :param beta1: decay of the first moment
    :param beta2: decay of the second moment
    :param eps: denominator offset
    :param clip: maximum global gradient norm, None or 0 disables clipping
    """

    def __init__(
        self,
        shapes: Mapping[str, tuple],
        lr: float = 2e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip: Optional[float] = 5.0,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.step: int = 0
        self.skipped: int = 0
        self.m: Dict[str, np.ndarray] = {n: np.zeros(s) for n, s in shapes.items()}
        self.v: Dict[str, np.ndarray] = {n: np.zeros(s) for n, s in shapes.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        """Checkpoint entries of the state"""
        out = {f"{PREFIX}step": np.array([self.step]), f"{PREFIX}skipped": np.array([self.skipped])}
        for name in self.m:
            out[f"{PREFIX}m.{name}"] = self.m[name]
            out[f"{PREFIX}v.{name}"] = self.v[name]
        return out

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Restore moments and step count written by arrays()

        :raises ShapeError: for missing entries or shape differences
        """
        for name in self.m:
            for key, store in ((f"{PREFIX}m.{name}", self.m), (f"{PREFIX}v.{name}", self.v)):
                if key not in arrays:
                    raise ShapeError(f"Optimizer state entry '{key}' is missing")
                value = np.asarray(arrays[key], dtype=np.float64)
                if value.shape != store[name].shape:
                    raise ShapeError(f"Optimizer state '{key}' has shape {value.shape}, expected {store[name].shape}")
                store[name] = value
        self.step = int(np.asarray(arrays.get(f"{PREFIX}step", [0])).reshape(-1)[0])
        self.skipped = int(np.asarray(arrays.get(f"{PREFIX}skipped", [0])).reshape(-1)[0])


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """Euclidean norm of all gradients together"""
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimState) -> bool:
    """Apply one bias-corrected adaptive moment update in place

    Gradients are first scaled down to the clip norm if their global norm
    exceeds it. Updates with non-finite gradients are skipped and logged, the
    parameters and moments are left untouched.

    :param params: name -> parameter tensor, only names with a gradient are updated
    :param grads: name -> gradient array
    :param state: optimizer state, modified
    :return applied: False if the update was skipped
    :raises ShapeError: if a gradient does not match its parameter or moments
    """
    for name, g in grads.items():
        if name not in state.m:
            raise ShapeError(f"No optimizer state for parameter '{name}'")
        if np.shape(g) != params[name].shape or np.shape(g) != state.m[name].shape:
            raise ShapeError(f"Gradient of '{name}' has shape {np.shape(g)}, expected {params[name].shape}")

    norm = global_norm(grads)
    if not np.isfinite(norm):
        state.skipped += 1
        log.warning("Skipped update %d: non-finite gradient", state.step + 1)
        return False
    scale = 1.0
    if state.clip and norm > state.clip:
        scale = state.clip / norm

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64) * scale
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * np.square(g)
        m_hat = state.m[name] / (1 - b1**t)
        v_hat = state.v[name] / (1 - b2**t)
        param = params[name]
        param.data = (param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    return True
