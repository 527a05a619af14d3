"""Module holding the SgvbUpdate action that trains a MatNet"""

from concurrent.futures import ThreadPoolExecutor
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from matnet import tensor as T
from matnet.actions.action import Action
from matnet.data import Dataset, MaskSpec, make_mask
from matnet.model import MatNet, Observation
from matnet.optimizer import OptimState, adam_step
from matnet.params import GENERATOR_GROUPS
from matnet.rng import Rng

log = logging.getLogger(__name__)

SHUFFLE_STREAM = 1
UPDATE_STREAM = 2
MASK_STREAM = 3


class UpdateStats:
    """Batch averages of one update, all in nats per example

    :param loss: minimized objective including the weighted auxiliary terms
    :param recon: reconstruction term
    :param layer_kls: KL per latent layer, z_0 first
    :param reg_term: weighted inference regularizer
    :param applied: False if the update was skipped
    """

    def __init__(self, loss: float, recon: float, layer_kls: np.ndarray, reg_term: float, applied: bool) -> None:
        self.loss = loss
        self.recon = recon
        self.layer_kls = layer_kls
        self.reg_term = reg_term
        self.applied = applied

    @property
    def kl_total(self) -> float:
        return float(np.sum(self.layer_kls))


class SgvbUpdate(Action):
    """Stochastic gradient updates of the variational bound

    Each update draws a minibatch from a per-epoch shuffle, splits it into a
    fixed number of microbatches and sums their gradients in microbatch order,
    so results do not depend on the number of worker threads.

    :param net: model to train
    :param data: training images
    :param state: optimizer state
    :param batch_size: images per update
    :param mc_samples: posterior samples per image
    :param reg_weight: weight of the inference regularizer, 0 disables it
    :param reg_hard: score sampled instead of mean images in the regularizer
    :param entropy_weight: weight of the mixture responsibility entropy penalty
    :param kl_warmup: updates of linear KL weight increase, 0 for none
    :param microbatches: number of microbatches per update
    :param threads: worker threads for the microbatches
    :param debug: assert that the regularizer leaves generator parameters alone
    :param seed: seed of shuffling, sampling and masks
    :param mask_spec: masks of conditional models
    """

    def __init__(
        self,
        net: MatNet,
        data: Dataset,
        state: OptimState,
        batch_size: int = 32,
        mc_samples: int = 1,
        reg_weight: float = 0.0,
        reg_hard: bool = False,
        entropy_weight: float = 0.0,
        kl_warmup: int = 0,
        microbatches: int = 1,
        threads: int = 1,
        debug: bool = False,
        seed: int = 0,
        mask_spec: Optional[MaskSpec] = None,
    ) -> None:
        print("Setting up stochastic gradient updates of the bound\n" + "Parameters:")
        if net.conditional and mask_spec is None:
            raise ValueError("Training a conditional model needs a mask specification")
        if data.shape != (net.config.image_channels, net.config.image_size, net.config.image_size):
            raise T.ShapeError(f"Images of shape {data.shape} do not fit the model")
        self.net = net
        self.data = data
        self.state = state
        self.batch_size = min(batch_size, len(data))
        self.mc_samples = mc_samples
        self.reg_weight = reg_weight
        self.reg_hard = reg_hard
        self.entropy_weight = entropy_weight
        self.kl_warmup = kl_warmup
        self.microbatches = max(1, min(microbatches, self.batch_size))
        self.threads = threads
        self.debug = debug
        self.seed = seed
        self.mask_spec = mask_spec
        self.updates_per_epoch = int(np.ceil(len(data) / self.batch_size))
        self.stats: Optional[UpdateStats] = None
        self._epoch: Optional[int] = None
        self._order: np.ndarray = np.arange(len(data))
        self._images: np.ndarray = data.images
        self._param_names: Dict[int, str] = {id(p): name for name, p in net.store.items()}
        self._executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        print(f"  images = {len(data)}")
        print(f"  batch_size = {self.batch_size}")
        print(f"  updates per epoch = {self.updates_per_epoch}")
        print(f"  lr = {state.lr}, clip = {state.clip}")
        print(f"  mc_samples = {mc_samples}")
        if reg_weight:
            print(f"  inference regularizer weight = {reg_weight} ({'hard' if reg_hard else 'mean'} samples)")
        if entropy_weight:
            print(f"  entropy penalty weight = {entropy_weight}")
        if kl_warmup:
            print(f"  KL warm-up over {kl_warmup} updates")
        if mask_spec is not None:
            print(f"  masks = {mask_spec}")
        print(f"  microbatches = {self.microbatches} on {threads} thread(s)")
        print()

    def kl_weight(self, step: int) -> float:
        if not self.kl_warmup:
            return 1.0
        return min(1.0, step / self.kl_warmup)

    def batch(self, step: int) -> Observation:
        """Minibatch of the given update"""
        epoch, pos = divmod(step - 1, self.updates_per_epoch)
        if epoch != self._epoch:
            self._epoch = epoch
            self._order = Rng(self.seed, SHUFFLE_STREAM).split(epoch).permutation(len(self.data))
            self._images = self.data.epoch_view(epoch)
        index = np.sort(self._order[pos * self.batch_size : (pos + 1) * self.batch_size])
        x = self._images[index]
        if self.mask_spec is None:
            return Observation(x)
        mask = make_mask(self.mask_spec, x.shape, Rng(self.seed, MASK_STREAM).split(step))
        return Observation(x, mask)

    def run(self, step: int) -> None:
        """Compute the gradient of one minibatch and update the parameters"""
        obs = self.batch(step)
        rng = Rng(self.seed, UPDATE_STREAM).split(step)
        parts = np.array_split(np.arange(len(obs)), self.microbatches)
        jobs = [(k, obs.subset(idx), len(idx) / len(obs), rng.split(k), self.kl_weight(step)) for k, idx in enumerate(parts)]
        if self._executor is not None:
            results = list(self._executor.map(lambda job: self.microbatch(*job), jobs))
        else:
            results = [self.microbatch(*job) for job in jobs]

        # ordered reduction
        grads: Dict[str, np.ndarray] = {}
        totals = np.zeros(4)
        layer_kls = np.zeros(self.net.depth + 1)
        for part_grads, part_totals, part_kls in results:
            for name, g in part_grads.items():
                grads[name] = grads[name] + g if name in grads else g
            totals += part_totals
            layer_kls += part_kls
        applied = adam_step(self.net.store.params, grads, self.state)
        loss, recon, _, reg_term = totals
        self.stats = UpdateStats(float(loss), float(recon), layer_kls, float(reg_term), applied)

    def microbatch(
        self, k: int, obs: Observation, weight: float, rng: Rng, kl_weight: float
    ) -> Tuple[Dict[str, np.ndarray], np.ndarray, np.ndarray]:
        """Weighted gradients and statistics of one microbatch

        :return (grads, totals, layer_kls): gradients by parameter name,
            weighted (loss, recon, kl_total, reg_term) and per layer KLs
        """
        with T.Tape() as tape:
            report = self.net.free_energy(obs, rng, self.mc_samples, self.entropy_weight)
            loss = report.loss(kl_weight) * weight
        grads = self._named(tape.backward(loss))
        layer_kls = report.layer_means().astype(np.float64) * weight
        recon = float(np.mean(report.recon_nll.data, dtype=np.float64)) * weight
        reg_term = 0.0
        if self.reg_weight > 0:
            condition = obs if self.net.conditional else None
            with T.Tape() as tape:
                reg = self.net.inference_regularizer(len(obs), rng.split(0), condition, self.reg_hard)
                reg_loss = reg * (self.reg_weight * weight)
            reg_grads = self._named(tape.backward(reg_loss))
            if self.debug:
                self.check_regularizer(reg_grads)
            for name, g in reg_grads.items():
                grads[name] = grads[name] + g if name in grads else g
            reg_term = reg_loss.item()
        totals = np.array([loss.item() + reg_term, recon, float(np.sum(layer_kls)), reg_term])
        log.debug("Microbatch %d: loss %g", k, totals[0])
        return grads, totals, layer_kls

    def _named(self, grads: Dict[T.Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
        return {self._param_names[id(p)]: g for p, g in grads.items() if id(p) in self._param_names}

    def check_regularizer(self, grads: Dict[str, np.ndarray]) -> None:
        """Raise if the regularizer produced a gradient for a generator parameter"""
        groups = self.net.store.groups
        leaked: List[str] = [n for n, g in grads.items() if groups[n] in GENERATOR_GROUPS and np.any(g != 0)]
        if leaked:
            raise RuntimeError(f"Inference regularizer produced gradients for generator parameters: {leaked}")

    def final_run(self, step: int) -> None:
        self.close()

    def close(self) -> None:
        """Stop the worker threads, further calls do nothing"""
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None
