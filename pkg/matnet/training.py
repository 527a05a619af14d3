"""Training loop and experiment drivers

train() sets up the actions (updates, metrics, KL profile, validation,
checkpoints) and runs them once per update in a plain main loop.
"""

import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from matnet import actions, inputparser
from matnet import tensor as T
from matnet.data import Dataset, MaskSpec, make_mask
from matnet.model import MatNet, Observation, load_checkpoint
from matnet.optimizer import OptimState
from matnet.rng import Rng

# alias shortcuts
Action = actions.action.Action
SgvbUpdate = actions.sgvb_update.SgvbUpdate
MetricsAction = actions.metrics.MetricsAction
KlProfileAction = actions.kl_profile.KlProfileAction
EvalAction = actions.eval_action.EvalAction
CheckpointAction = actions.checkpoint.CheckpointAction
KlProfile = actions.kl_profile.KlProfile
kl_profile_export = actions.kl_profile.kl_profile_export
validation_nll = actions.eval_action.validation_nll

log = logging.getLogger(__name__)


class TrainConfig:
    """Options of the optimization

    :param epochs: passes over the training images
    :param batch_size: images per update
    :param lr: learning rate
    :param beta1: first moment decay
    :param beta2: second moment decay
    :param eps: denominator offset of the update
    :param clip: global gradient norm clip
    :param mc_samples: posterior samples per image
    :param regularizer: train the inference side on model samples as well
    :param reg_weight: weight of that regularizer
    :param reg_hard: score sampled instead of mean images in the regularizer
    :param entropy_weight: weight of the mixture responsibility entropy penalty
    :param kl_warmup: updates of linear KL weight increase, 0 for none
    :param eval_stride: validate every n updates, 0 for the end only
    :param eval_samples: importance samples of the validation bound
    :param val_fraction: share of the images held out for validation
    :param iwae_k: importance samples of the final evaluation
    :param checkpoint_stride: save every n updates, 0 for the end only
    :param microbatches: microbatches per update
    :param threads: worker threads for the microbatches
    :param debug: assert regularizer isolation in every update
    :param checked: finiteness checks of all tensor operations
    :param seed: seed of all training randomness
    """

    KEYS = (
        "epochs",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "clip",
        "mc_samples",
        "regularizer",
        "reg_weight",
        "reg_hard",
        "entropy_weight",
        "kl_warmup",
        "eval_stride",
        "eval_samples",
        "val_fraction",
        "iwae_k",
        "checkpoint_stride",
        "microbatches",
        "threads",
        "debug",
        "checked",
        "seed",
    )

    def __init__(
        self,
        epochs: int = 10,
        batch_size: int = 32,
        lr: float = 2e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip: float = 5.0,
        mc_samples: int = 1,
        regularizer: bool = False,
        reg_weight: float = 0.2,
        reg_hard: bool = False,
        entropy_weight: float = 0.05,
        kl_warmup: int = 0,
        eval_stride: int = 0,
        eval_samples: int = 1,
        val_fraction: float = 0.1,
        iwae_k: int = 100,
        checkpoint_stride: int = 0,
        microbatches: int = 1,
        threads: int = 1,
        debug: bool = False,
        checked: bool = False,
        seed: int = 0,
    ) -> None:
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.mc_samples = mc_samples
        self.regularizer = regularizer
        self.reg_weight = reg_weight
        self.reg_hard = reg_hard
        self.entropy_weight = entropy_weight
        self.kl_warmup = kl_warmup
        self.eval_stride = eval_stride
        self.eval_samples = eval_samples
        self.val_fraction = val_fraction
        self.iwae_k = iwae_k
        self.checkpoint_stride = checkpoint_stride
        self.microbatches = microbatches
        self.threads = threads
        self.debug = debug
        self.checked = checked
        self.seed = seed
        self.validate()

    def validate(self) -> None:
        """Check the options

        :raises ValueError: with a description of the first problem found
        """
        for key in ("epochs", "batch_size", "mc_samples", "eval_samples", "iwae_k", "microbatches", "threads"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be at least 1")
        for key in ("lr", "eps", "clip"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        for key in ("reg_weight", "entropy_weight", "kl_warmup", "eval_stride", "checkpoint_stride"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must not be negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must be within [0, 1)")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be within [0, 1)")

    @classmethod
    def from_options(cls, options: Dict) -> "TrainConfig":
        """Build from a (parsed) option dictionary, None values take the defaults"""
        return cls(**{k: v for k, v in options.items() if k in cls.KEYS and v is not None})

    def options(self) -> Dict:
        return {k: getattr(self, k) for k in self.KEYS}

    @property
    def effective_reg_weight(self) -> float:
        return self.reg_weight if self.regularizer else 0.0

    def optim_state(self, net: MatNet) -> OptimState:
        shapes = {name: p.shape for name, p in net.store.items()}
        return OptimState(shapes, self.lr, self.beta1, self.beta2, self.eps, self.clip)


class TrainResult:
    """Everything a training run produced in memory

    :param metrics: rows (update, loss, recon, kl_total, reg_term)
    :param profile: per layer KL of every update
    :param validation: (update, nll) of every validation
    :param state: final optimizer state
    """

    def __init__(
        self, metrics: List[list], profile: KlProfile, validation: List[Tuple[int, float]], state: OptimState
    ) -> None:
        self.metrics = metrics
        self.profile = profile
        self.validation = validation
        self.state = state


def train(
    net: MatNet,
    data: Dataset,
    cfg: TrainConfig,
    val_data: Optional[Dataset] = None,
    mask_spec: Optional[MaskSpec] = None,
    run_dir: Optional[str] = None,
    config_text: Optional[str] = None,
    resume: bool = False,
) -> TrainResult:
    """Train a model on a dataset

    Without run_dir nothing is written to disk. With it, the directory gets
    metrics.csv, timing.csv, kl_profile.csv, kl_profile.png, validation.csv and
    checkpoints/.

    :param val_data: held-out images, split off data with cfg.val_fraction if not given
    :param mask_spec: masks of conditional models
    :param config_text: manifest of the checkpoints, generated from the configs if not given
    :param resume: continue from the newest checkpoint in run_dir
    :raises ShapeError: if the images do not fit the model
    """
    if val_data is None and cfg.val_fraction > 0 and len(data) > 1:
        data, val_data = data.split(cfg.val_fraction, cfg.seed)
    config_text = config_text or inputparser.to_text({**net.config.options(), **cfg.options()})

    state = cfg.optim_state(net)
    start = 0
    if resume:
        start = restore(net, state, run_dir)

    def path(name: str) -> Optional[str]:
        return os.path.join(run_dir, name) if run_dir else None

    # actions are run in order of insertion
    update = SgvbUpdate(
        net,
        data,
        state,
        cfg.batch_size,
        cfg.mc_samples,
        cfg.effective_reg_weight,
        cfg.reg_hard,
        cfg.entropy_weight if net.config.prior == "mixture" else 0.0,
        cfg.kl_warmup,
        cfg.microbatches,
        cfg.threads,
        cfg.debug,
        cfg.seed,
        mask_spec,
    )
    metrics = MetricsAction(update, path("metrics.csv"), path("timing.csv"), append=resume)
    profile = KlProfileAction(update, net.layer_groups(), path("kl_profile.csv"), path("kl_profile.png"), resume)
    actions_list: List[Action] = [update, metrics, profile]
    evaluation = None
    if val_data is not None:
        evaluation = EvalAction(
            net,
            val_data,
            cfg.eval_stride,
            cfg.eval_samples,
            cfg.seed,
            mask_spec,
            cfg.batch_size,
            path("validation.csv"),
            resume,
        )
        actions_list.append(evaluation)
    if run_dir:
        actions_list.append(
            CheckpointAction(net, state, os.path.join(run_dir, "checkpoints"), config_text, cfg.checkpoint_stride)
        )

    n_updates = cfg.epochs * update.updates_per_epoch
    print(f"Setup finished, now running updates {start + 1} to {n_updates}")
    try:
        with T.checked(cfg.checked):
            for step in range(start + 1, n_updates + 1):
                for action in actions_list:
                    action.run(step)

            print("Training finished, performing final actions")
            for action in actions_list:
                action.final_run(n_updates)
    finally:
        update.close()

    validation = evaluation.results if evaluation is not None else []
    return TrainResult(metrics.rows, profile.profile, validation, state)


def restore(net: MatNet, state: OptimState, run_dir: Optional[str]) -> int:
    """Load parameters and optimizer state of the newest checkpoint

    :return update: the update the checkpoint was written after
    :raises FileNotFoundError: if there is no checkpoint to resume from
    """
    latest = actions.checkpoint.latest_checkpoint(os.path.join(run_dir or "", "checkpoints"))
    if latest is None:
        raise FileNotFoundError(f"No checkpoint to resume from in '{run_dir}'")
    saved, _, extra = load_checkpoint(latest)
    net.store.load(saved.store.arrays())
    state.load(extra)
    start = int(np.asarray(extra[actions.checkpoint.UPDATE_KEY]).reshape(-1)[0])
    print(f"Resuming from '{latest}' after update {start}\n")
    return start


def marginal_bernoulli_nll(
    train_images: np.ndarray, eval_images: np.ndarray, mask: Optional[np.ndarray] = None
) -> float:
    """Mean NLL in nats of independent per sub-pixel Bernoulli variables

    The probabilities are the maximum likelihood estimates on train_images
    (clipped away from 0 and 1). With a mask only unknown sub-pixels count.
    """
    train_images = np.asarray(train_images, dtype=np.float64)
    eval_images = np.asarray(eval_images, dtype=np.float64)
    p = np.clip(train_images.mean(axis=0), 1e-4, 1 - 1e-4)
    per_pixel = -(eval_images * np.log(p) + (1 - eval_images) * np.log1p(-p))
    if mask is not None:
        per_pixel = per_pixel * (1 - np.asarray(mask, dtype=np.float64))
    return float(np.mean(per_pixel.reshape(len(eval_images), -1).sum(axis=1)))


def quadrant_task(net: MatNet, images: np.ndarray, q_known: int, rng: Rng, k: int = 1) -> float:
    """Mean NLL of the unknown quadrants given q_known random known quadrants

    :param k: importance samples of the estimate
    :raises ValueError: for q_known outside 1..3 or unconditional models
    """
    if q_known not in (1, 2, 3):
        raise ValueError(f"Number of known quadrants must be 1, 2 or 3, got {q_known}")
    if not net.conditional:
        raise ValueError("The quadrant task needs a conditional model")
    images = np.asarray(images, dtype=T.default_dtype())
    mask = make_mask(MaskSpec("quadrants", q_known), images.shape, rng)
    return net.eval_nll(Observation(images, mask), k, rng)


def quadrant_baseline(train_images: np.ndarray, images: np.ndarray, q_known: int, rng: Rng) -> float:
    """marginal_bernoulli_nll on the unknown quadrants, masks drawn like quadrant_task"""
    mask = make_mask(MaskSpec("quadrants", q_known), np.shape(images), rng)
    return marginal_bernoulli_nll(train_images, images, mask)

