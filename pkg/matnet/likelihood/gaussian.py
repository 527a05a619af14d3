"""Diagonal Gaussian pixels, for dequantized continuous data"""

import numpy as np

from matnet import distributions
from matnet import tensor as T
from matnet.likelihood.likelihood import OutputLikelihood
from matnet.rng import Rng
from matnet.tensor import Tensor


class GaussianLikelihood(OutputLikelihood):
    """Gaussian per sub-pixel with parameters [mu; log_var]

    The log-variance uses the same clamp as the latent distributions.
    """

    kind = "diag_gaussian"
    n_params = 2

    def _parts(self, params: Tensor):
        mu, log_var = self.split(params)
        return mu, T.clip(log_var, distributions.LOG_VAR_MIN, distributions.LOG_VAR_MAX)

    def nll_map(self, params: Tensor, x: Tensor) -> Tensor:
        mu, log_var = self._parts(params)
        diff = x - mu
        return (diff * diff * T.exp(-log_var) + log_var + distributions.LOG_2PI) * 0.5

    def sample(self, params: Tensor, rng: Rng) -> np.ndarray:
        mu, log_var = self._parts(params)
        return mu.data + np.exp(0.5 * log_var.data) * rng.normal(mu.shape)

    def mean(self, params: Tensor) -> np.ndarray:
        return self._parts(params)[0].data
