"""Module holding the EvalAction class

Also holds the evaluation function shared with the command line interface
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from matnet.actions.action import Action, stride_matches
from matnet.data import Dataset, MaskSpec, make_mask
from matnet.distributions import bits_per_pixel
from matnet.helpers.misc import append_rows, initialize_file
from matnet.model import MatNet, Observation
from matnet.rng import Rng

log = logging.getLogger(__name__)

EVAL_STREAM = 11
EVAL_MASK_STREAM = 12

EVAL_FIELDS = ["update", "nll", "bits_per_subpixel"]


def eval_observations(net: MatNet, d: Dataset, seed: int, mask_spec: Optional[MaskSpec] = None) -> Observation:
    """Fixed evaluation view of a dataset, with masks for conditional models

    :raises ValueError: if a conditional model gets no mask specification
    """
    x = d.epoch_view(0)
    if not net.conditional:
        return Observation(x)
    if mask_spec is None:
        raise ValueError("Evaluating a conditional model needs a mask specification")
    return Observation(x, make_mask(mask_spec, x.shape, Rng(seed, EVAL_MASK_STREAM)))


def validation_nll(
    net: MatNet,
    d: Dataset,
    k: int,
    seed: int,
    mask_spec: Optional[MaskSpec] = None,
    batch_size: int = 100,
) -> np.ndarray:
    """Importance weighted NLL estimate of every image in nats

    The result only depends on the model, the images, k, the seed and the
    batch size, so evaluations during training and of a saved checkpoint agree.
    """
    obs = eval_observations(net, d, seed, mask_spec)
    rng = Rng(seed, EVAL_STREAM)
    parts = []
    for i, start in enumerate(range(0, len(obs), batch_size)):
        part = obs.subset(slice(start, start + batch_size))
        parts.append(net.eval_nll_per_example(part, k, rng.split(i)))
    return np.concatenate(parts)


def is_discrete(net: MatNet) -> bool:
    """If the output likelihood assigns probabilities rather than densities"""
    return net.config.likelihood != "diag_gaussian"


class EvalAction(Action):
    """Evaluate the bound on held-out images

    :param net: model to evaluate
    :param data: validation images
    :param stride: evaluate every n updates, 0 for the end only
    :param k: importance samples per image
    :param seed: seed of the evaluation samples and masks
    :param mask_spec: masks of conditional models
    :param batch_size: images per evaluation batch
    :param filename: csv file for the results, optional
    :param append: continue an existing file instead of starting a new one
    """

    def __init__(
        self,
        net: MatNet,
        data: Dataset,
        stride: int = 0,
        k: int = 1,
        seed: int = 0,
        mask_spec: Optional[MaskSpec] = None,
        batch_size: int = 100,
        filename: Optional[str] = None,
        append: bool = False,
    ) -> None:
        print("Setting up evaluation on the validation images\n" + "Parameters:")
        self.net = net
        self.data = data
        self.stride = stride
        self.k = k
        self.seed = seed
        self.mask_spec = mask_spec
        self.batch_size = batch_size
        self.filename = filename
        self.results: List[Tuple[int, float]] = []
        self.last_step: int = 0
        print(f"  images = {len(data)}")
        print(f"  importance samples = {k}")
        if stride:
            print(f"  stride = {stride}")
        if filename:
            if not append:
                initialize_file(filename, EVAL_FIELDS)
            print(f"Saving the results to '{filename}'")
        print()

    def run(self, step: int) -> None:
        if stride_matches(step, self.stride):
            self.evaluate(step)

    def final_run(self, step: int) -> None:
        if self.last_step != step:
            self.evaluate(step)

    def evaluate(self, step: int) -> float:
        nll = float(np.mean(validation_nll(self.net, self.data, self.k, self.seed, self.mask_spec, self.batch_size)))
        bpp = bits_per_pixel(nll, self.net.config.num_subpixels, is_discrete(self.net))
        log.info("Validation after update %d: %.4f nats, %.4f bits per sub-pixel", step, nll, bpp)
        self.results.append((step, nll))
        self.last_step = step
        if self.filename:
            append_rows(self.filename, [[step, nll, bpp]])
        return nll
