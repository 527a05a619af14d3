"""Gaussian latent distributions, KL divergences and likelihood bounds

Latent distributions are diagonal Gaussians whose log-variances are clamped to
[LOG_VAR_MIN, LOG_VAR_MAX]. KL divergences are returned per example as
Tensor[b] (summed over all latent dimensions).
"""

import logging
from typing import List, Optional, Sequence, Union

import numpy as np

from matnet import tensor as T
from matnet.rng import Rng
from matnet.tensor import ShapeError, Tensor

LOG_VAR_MIN = -6.0
LOG_VAR_MAX = 3.0
PROB_FLOOR = 1e-12
LN2 = float(np.log(2.0))
LN256 = float(np.log(256.0))
LOG_2PI = float(np.log(2 * np.pi))

log = logging.getLogger(__name__)


class DiagGaussian:
    """Gaussian with diagonal covariance

    :param mu: means
    :param log_var: log-variances, clamped at construction
    :param clamped: True if any log-variance was outside the allowed range
    """

    def __init__(self, mu: Union[Tensor, np.ndarray], log_var: Union[Tensor, np.ndarray]) -> None:
        mu, log_var = T.as_tensor(mu), T.as_tensor(log_var)
        if mu.shape != log_var.shape:
            raise ShapeError(f"Mean shape {mu.shape} differs from log-variance shape {log_var.shape}")
        self.clamped = bool(np.any(log_var.data < LOG_VAR_MIN) or np.any(log_var.data > LOG_VAR_MAX))
        self.mu = mu
        self.log_var = T.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def from_features(cls, params: Tensor) -> "DiagGaussian":
        """Split a feature stack [mu; log_var] into a distribution"""
        n = params.shape[1]
        if n % 2:
            raise ShapeError(f"Need an even number of parameter features, got {n}")
        return cls(T.take_features(params, 0, n // 2), T.take_features(params, n // 2, n))

    @classmethod
    def standard(cls, shape: Sequence[int]) -> "DiagGaussian":
        """N(0, 1) of the given shape"""
        zeros = np.zeros(shape, dtype=T.default_dtype())
        return cls(zeros, zeros)

    @property
    def shape(self):
        return self.mu.shape

    def log_prob(self, z: Union[Tensor, np.ndarray]) -> Tensor:
        """Per example log density of z"""
        z = T.as_tensor(z)
        check_shape(self.mu, z)
        diff = z - self.mu
        terms = diff * diff * T.exp(-self.log_var) + self.log_var + LOG_2PI
        return T.sum_per_example(terms) * -0.5

    def stop_gradient(self) -> "DiagGaussian":
        return DiagGaussian(T.stop_gradient(self.mu), T.stop_gradient(self.log_var))


def check_shape(a: Tensor, b: Tensor) -> None:
    """Shapes must agree except for a broadcast batch dimension of 1"""
    if a.ndim != b.ndim or a.shape[1:] != b.shape[1:] or (a.shape[0] != b.shape[0] and 1 not in (a.shape[0], b.shape[0])):
        raise ShapeError(f"Shape mismatch between {a.shape} and {b.shape}")


class MixturePrior:
    """Uniformly weighted mixture of diagonal Gaussians over z_0

    :param components: the k mixture components, all of the same shape
    """

    def __init__(self, components: List[DiagGaussian]) -> None:
        if not components:
            raise ValueError("A mixture prior needs at least one component")
        for c in components[1:]:
            if c.shape != components[0].shape:
                raise ShapeError("All mixture components must share one shape")
        self.components = components
        self.k = len(components)
        self.weights = np.full(self.k, 1 / self.k)

    def log_prob(self, z: Tensor) -> Tensor:
        """log(1/k sum_i p_i(z)) per example"""
        cols = [T.reshape(c.log_prob(z), (-1, 1)) for c in self.components]
        return T.logsumexp(T.concat_features(cols), axis=1) - float(np.log(self.k))

    def sample(self, n: int, rng: Rng) -> Tensor:
        """Pick a component uniformly per example, then reparametrize"""
        choice = rng.integers(0, self.k, n)
        shape = (n,) + tuple(self.components[0].shape[1:])
        eps = rng.normal(shape)
        mu = np.stack([np.broadcast_to(c.mu.data[0], shape[1:]) for c in self.components])
        log_var = np.stack([np.broadcast_to(c.log_var.data[0], shape[1:]) for c in self.components])
        return Tensor(mu[choice] + np.exp(0.5 * log_var[choice]) * eps)


def reparam_sample(q: DiagGaussian, eps: Union[Tensor, np.ndarray]) -> Tensor:
    """z = mu + exp(log_var / 2) * eps

    eps is treated as a constant, gradients flow to mu and log_var only.
    """
    eps = T.stop_gradient(eps)
    if eps.shape != q.shape:
        raise ShapeError(f"Noise shape {eps.shape} differs from distribution shape {q.shape}")
    return q.mu + T.exp(q.log_var * 0.5) * eps


def kl_diag_gauss(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Closed form KL(q || p) summed per example"""
    check_shape(q.mu, p.mu)
    diff = p.mu - q.mu
    inv_var_p = T.exp(-p.log_var)
    terms = T.exp(q.log_var - p.log_var) + diff * diff * inv_var_p - 1.0 + p.log_var - q.log_var
    return T.sum_per_example(terms) * 0.5


def _component_kls(q: DiagGaussian, prior: MixturePrior) -> Tensor:
    """Tensor[b, k] of KL(q || p_i)"""
    cols = [T.reshape(kl_diag_gauss(q, c), (-1, 1)) for c in prior.components]
    return T.concat_features(cols)


def kl_mixture_approx(q: DiagGaussian, prior: MixturePrior) -> Tensor:
    """Approximate KL to a mixture prior: -log sum_i exp(-KL(q || p_i))

    Can become negative for distributions far from all but one component.
    """
    kls = _component_kls(q, prior)
    approx = -T.logsumexp(-kls, axis=1)
    if np.any(approx.data < 0):
        log.debug("Mixture KL approximation is negative for %d examples", int(np.sum(approx.data < 0)))
    return approx


def mixture_responsibilities(q: DiagGaussian, prior: MixturePrior) -> Tensor:
    """Softmax over components of -KL(q || p_i), rows sum to one"""
    neg = -_component_kls(q, prior)
    norm = T.logsumexp(neg, axis=1)
    return T.exp(neg - T.reshape(norm, (-1, 1)))


def entropy_penalty(resp: Tensor) -> Tensor:
    """Mean entropy -sum_i r_i log r_i of the responsibility rows

    :raises ValueError: if rows do not sum to one (checked mode only)
    """
    if T.is_checked() and not np.allclose(resp.data.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("Responsibility rows must sum to one")
    ent = T.sum(resp * T.log(T.clip(resp, PROB_FLOOR, None)), axis=1)
    return -T.mean(ent)


def nll(like, params: Tensor, x: Union[Tensor, np.ndarray], weight: Optional[np.ndarray] = None) -> Tensor:
    """Per example negative log-likelihood of x under an output likelihood

    :param like: OutputLikelihood instance
    :param params: likelihood parameters as produced by the model
    :param weight: optional per sub-pixel weight (e.g. mask of unknown pixels)
    """
    return like.nll(params, x, weight)


def iwae_bound(log_weights: Union[Tensor, np.ndarray]) -> Tensor:
    """Importance weighted bound log(1/k sum_j exp(w_j)) per example

    :param log_weights: Tensor[b, k] of log p(x, z_j) - log q(z_j | x)
    """
    log_weights = T.as_tensor(log_weights)
    if log_weights.ndim != 2:
        raise ShapeError(f"Log weights must be of shape (batch, k), got {log_weights.shape}")
    k = log_weights.shape[1]
    return T.logsumexp(log_weights, axis=1) - float(np.log(k))


def bits_per_pixel(nll_nats: float, num_subpixels: int, discrete: bool = False) -> float:
    """Convert a per example NLL in nats to bits per sub-pixel

    For densities over [0, 1] on dequantized data the density has to be
    rescaled to the 256 discrete levels, which adds ln 256 per sub-pixel.
    Discrete likelihoods need no correction.

    :raises ValueError: for non-positive sub-pixel counts
    """
    if num_subpixels <= 0:
        raise ValueError(f"Number of sub-pixels must be positive, got {num_subpixels}")
    per_pixel = nll_nats / num_subpixels
    if discrete:
        return per_pixel / LN2
    return (per_pixel + LN256) / LN2
