"""Masked-convolution autoregressive output head

The head replaces the factorized reconstruction distribution. Every layer
adds a masked convolution of its input (the image for the first layer) and an
unmasked convolution of the final top-down state, so pixel (r, c) only sees
image pixels strictly before it in raster order while the model output is
visible everywhere.

Masks act on the spatial taps only: the sub-pixels of one pixel are
conditionally independent given the earlier pixels and the model output.
"""

from typing import List, Optional, Tuple

import numpy as np

from matnet import tensor as T
from matnet.layers import Conv, KERNEL_SIZE
from matnet.likelihood.likelihood import OutputLikelihood
from matnet.params import ParamStore
from matnet.rng import Rng
from matnet.tensor import ShapeError, Tensor


def raster_mask(c_out: int, c_in: int, k: int, mask_type: str) -> np.ndarray:
    """Kernel mask keeping the taps before the centre (A) or up to it (B)

    :raises ValueError: for mask types other than 'A' and 'B'
    """
    if mask_type not in ("A", "B"):
        raise ValueError(f"Mask type must be 'A' or 'B', got '{mask_type}'")
    centre = k // 2
    mask = np.zeros((c_out, c_in, k, k))
    mask[:, :, :centre, :] = 1
    mask[:, :, centre, :centre] = 1
    if mask_type == "B":
        mask[:, :, centre, centre] = 1
    return mask


class MaskedConvLayer:
    """Masked convolution of the activations plus unmasked conditioning

    out = masked_conv(h) + conv(cond)
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        c_in: int,
        c_out: int,
        c_cond: int,
        mask_type: str,
        k: int = KERNEL_SIZE,
    ) -> None:
        self.store = store
        self.mask_type = mask_type
        self.mask = raster_mask(c_out, c_in, k, mask_type)
        self.kernel = f"{name}.kernel"
        self.bias = f"{name}.bias"
        store.add(self.kernel, (c_out, c_in, k, k), "ar")
        store.add(self.bias, (c_out,), "ar", "zeros")
        self.cond = Conv(store, f"{name}.cond", c_cond, c_out, "ar")

    def __call__(self, h: Tensor, cond: Tensor) -> Tensor:
        kernel = self.store.get(self.kernel) * self.mask
        return T.conv2d_same(h, kernel, self.store.get(self.bias)) + self.cond(cond)


class ArHead:
    """PixelCNN-style head: one type A layer followed by type B layers

    :param channels: image channels
    :param cond_channels: feature count of the top-down output
    :param like: output likelihood whose parameters the last layer emits
    :param n_layers: total number of masked layers
    :param features: feature maps of the hidden layers
    """

    def __init__(
        self,
        store: ParamStore,
        channels: int,
        cond_channels: int,
        like: OutputLikelihood,
        n_layers: int = 5,
        features: int = 16,
        slope: float = 0.1,
    ) -> None:
        if n_layers < 2:
            raise ValueError(f"The autoregressive head needs at least 2 layers, got {n_layers}")
        self.like = like
        self.channels = channels
        self.slope = slope
        self.layers: List[MaskedConvLayer] = [MaskedConvLayer(store, "ar.0", channels, features, cond_channels, "A")]
        for i in range(1, n_layers - 1):
            self.layers.append(MaskedConvLayer(store, f"ar.{i}", features, features, cond_channels, "B"))
        self.layers.append(MaskedConvLayer(store, f"ar.{n_layers - 1}", features, like.n_features, cond_channels, "B"))


def ar_forward(head: ArHead, x, td_out: Tensor) -> Tensor:
    """Likelihood parameters for every pixel given earlier pixels and td_out

    :raises ShapeError: if x and td_out differ in batch or spatial dims
    """
    x = T.as_tensor(x)
    if x.ndim != 4 or x.shape[0] != td_out.shape[0] or x.shape[2:] != td_out.shape[2:]:
        raise ShapeError(f"Image {x.shape} and conditioning {td_out.shape} do not match")
    h = x
    for layer in head.layers[:-1]:
        h = T.lrelu(layer(h, td_out), head.slope)
    return head.layers[-1](h, td_out)


def ar_nll(
    head: ArHead, x, td_out: Tensor, weight: Optional[np.ndarray] = None, check: bool = True
) -> Tensor:
    """Per example negative log-likelihood of x under the head"""
    return head.like.nll(ar_forward(head, x, td_out), x, weight, check)


def ar_sample(
    head: ArHead,
    td_out: Tensor,
    rng: Rng,
    known: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Sample pixel by pixel in raster order

    Every step re-runs the head on the partially filled image. Sub-pixels with
    mask 1 are copied from known instead of sampled.

    :return (x, log_prob): samples and the summed log-probabilities of the
                           sampled sub-pixels per example
    """
    b, _, height, width = td_out.shape
    shape = (b, head.channels, height, width)
    x = np.zeros(shape, dtype=T.default_dtype())
    free = np.ones(shape, dtype=x.dtype)
    if known is not None and mask is not None:
        x = np.where(mask > 0, known, 0).astype(x.dtype)
        free = (1 - mask).astype(x.dtype)
    log_prob = np.zeros(b, dtype=np.float64)
    with T.suspended():
        for r in range(height):
            for c in range(width):
                params = ar_forward(head, Tensor(x), td_out)
                pix_params = Tensor(params.data[:, :, r : r + 1, c : c + 1])
                draw = head.like.sample(pix_params, rng)
                pix_free = free[:, :, r : r + 1, c : c + 1]
                value = np.where(pix_free > 0, draw, x[:, :, r : r + 1, c : c + 1])
                x[:, :, r : r + 1, c : c + 1] = value
                pix_nll = head.like.nll_map(pix_params, Tensor(value)).data * pix_free
                log_prob -= pix_nll.reshape(b, -1).sum(axis=1)
    return x, log_prob
