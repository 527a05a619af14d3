"""Independent Bernoulli pixels with a logistic link"""

import numpy as np
from scipy import special

from matnet import tensor as T
from matnet.likelihood.likelihood import OutputLikelihood
from matnet.rng import Rng
from matnet.tensor import Tensor


class BernoulliLikelihood(OutputLikelihood):
    """Bernoulli distribution per sub-pixel, parametrized by logits

    -log p(x | l) = softplus(l) - x * l
    """

    kind = "bernoulli"
    n_params = 1

    def check_data(self, x: np.ndarray) -> None:
        if not np.all((x == 0) | (x == 1)):
            raise ValueError("Bernoulli likelihood needs binary data")

    def nll_map(self, params: Tensor, x: Tensor) -> Tensor:
        (logits,) = self.split(params)
        return T.softplus(logits) - x * logits

    def sample(self, params: Tensor, rng: Rng) -> np.ndarray:
        return rng.bernoulli(self.mean(params))

    def mean(self, params: Tensor) -> np.ndarray:
        (logits,) = self.split(params)
        return special.expit(logits.data)
