"""Logistic density integrated over the 256 intensity bins"""

import numpy as np
from scipy import special

from matnet import distributions
from matnet import tensor as T
from matnet.likelihood.likelihood import OutputLikelihood
from matnet.rng import Rng
from matnet.tensor import Tensor

LEVELS = 256
LOG_SCALE_MIN = -7.0
LOG_SCALE_MAX = 5.0


class IntegratedLogisticLikelihood(OutputLikelihood):
    """Discretized logistic per sub-pixel with parameters [mu; log_scale]

    Data in [0, 1] is mapped to the nearest of the levels v / 255. Level v
    gets the probability mass of the bin [v/255 - 1/510, v/255 + 1/510], the
    lowest and highest bins extend to -inf and +inf, so the masses of all
    levels sum to one. Probabilities are floored at PROB_FLOOR before the log.
    """

    kind = "integrated_logistic"
    n_params = 2

    def _parts(self, params: Tensor):
        mu, log_scale = self.split(params)
        return mu, T.clip(log_scale, LOG_SCALE_MIN, LOG_SCALE_MAX)

    def nll_map(self, params: Tensor, x: Tensor) -> Tensor:
        mu, log_scale = self._parts(params)
        levels = np.rint(np.clip(x.data, 0, 1) * (LEVELS - 1))
        centre = (levels / (LEVELS - 1)).astype(x.dtype)
        half = 0.5 / (LEVELS - 1)
        lowest = (levels == 0).astype(x.dtype)
        highest = (levels == LEVELS - 1).astype(x.dtype)
        inner = 1 - lowest - highest

        inv_scale = T.exp(-log_scale)
        upper = (centre + half - mu) * inv_scale
        lower = (centre - half - mu) * inv_scale
        # log cdf(upper) and log(1 - cdf(lower)) for the open bins
        log_below = -T.softplus(-upper)
        log_above = -T.softplus(lower)
        mass = T.sigmoid(upper) - T.sigmoid(lower)
        log_mass = T.log(T.clip(mass, distributions.PROB_FLOOR, None))
        log_p = log_below * lowest + log_above * highest + log_mass * inner
        return -log_p

    def sample(self, params: Tensor, rng: Rng) -> np.ndarray:
        mu, log_scale = self._parts(params)
        u = np.clip(rng.uniform(mu.shape), 1e-6, 1 - 1e-6)
        draw = mu.data + np.exp(log_scale.data) * special.logit(u)
        return (np.rint(np.clip(draw, 0, 1) * (LEVELS - 1)) / (LEVELS - 1)).astype(mu.dtype)

    def mean(self, params: Tensor) -> np.ndarray:
        return np.clip(self._parts(params)[0].data, 0, 1)
