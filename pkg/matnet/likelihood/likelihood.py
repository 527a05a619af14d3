"""Base class of the per sub-pixel output distributions"""

from typing import List, Optional, Union

import numpy as np

from matnet import tensor as T
from matnet.rng import Rng
from matnet.tensor import ShapeError, Tensor


class OutputLikelihood:
    """Base class for output likelihoods

    The model emits the parameters of all sub-pixels as one feature stack of
    shape (b, n_params * channels, h, w): the first `channels` features hold
    the first parameter, the next `channels` the second and so on.
    Derived classes must implement nll_map(), sample() and mean() and set kind.

    :param channels: number of image channels
    """

    kind: str = ""
    n_params: int = 1

    def __init__(self, channels: int) -> None:
        self.channels = channels

    def __str__(self) -> str:
        return f"{self.kind} likelihood over {self.channels} channel(s)"

    @property
    def n_features(self) -> int:
        """Number of parameter feature maps the model has to emit"""
        return self.n_params * self.channels

    def split(self, params: Tensor) -> List[Tensor]:
        """Split the parameter stack into one tensor per parameter"""
        if params.shape[1] != self.n_features:
            raise ShapeError(f"{self.kind} needs {self.n_features} parameter features, got {params.shape[1]}")
        c = self.channels
        return [T.take_features(params, i * c, (i + 1) * c) for i in range(self.n_params)]

    def check_data(self, x: np.ndarray) -> None:
        """Hook for kind specific data checks, only called in checked mode"""

    def nll_map(self, params: Tensor, x: Tensor) -> Tensor:
        """Negative log-likelihood of every sub-pixel, same shape as x"""
        raise NotImplementedError()

    def nll(
        self,
        params: Tensor,
        x: Union[Tensor, np.ndarray],
        weight: Optional[np.ndarray] = None,
        check: bool = True,
    ) -> Tensor:
        """Per example negative log-likelihood in nats

        :param params: parameter stack
        :param x: data in [0, 1]
        :param weight: optional sub-pixel weights, e.g. 1 - mask to score unknown pixels only
        :param check: run the data check of the kind in checked mode
        :raises ShapeError: if x does not fit the parameters
        """
        x = T.stop_gradient(x)
        if x.shape[0] != params.shape[0] or x.shape[1] != self.channels or x.shape[2:] != params.shape[2:]:
            raise ShapeError(f"Data of shape {x.shape} does not fit parameters {params.shape}")
        if check and T.is_checked():
            self.check_data(x.data)
        per_pixel = self.nll_map(params, x)
        if weight is not None:
            per_pixel = per_pixel * np.asarray(weight, dtype=x.dtype)
        return T.sum_per_example(per_pixel)

    def sample(self, params: Tensor, rng: Rng) -> np.ndarray:
        """Draw data from the distribution"""
        raise NotImplementedError()

    def mean(self, params: Tensor) -> np.ndarray:
        """Mean of the distribution (used for deterministic renderings)"""
        raise NotImplementedError()
