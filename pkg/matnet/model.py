"""Hierarchical MatNet models

A model consists of meta-modules (a fully-connected one and one per spatial
scale), each holding a number of top-down (TD), bottom-up (BU) and merge
module triples. Latent layers are numbered in generation order: z_0 first,
then one latent layer per TD module from the fully-connected meta-module down
to the finest scale. BU module i is paired with TD module i, so the BU pass
evaluates the modules in reverse order.

Conditional models predict unknown pixels x^u from known pixels x^k. They
carry a second set of BU and merge modules on the generator side, which only
ever see [x^k; mask], and provide the priors p(z_i | ...) for every layer.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from matnet import archive, distributions, inputparser, likelihood
from matnet import tensor as T
from matnet.ar_head import ArHead, ar_forward, ar_nll, ar_sample
from matnet.distributions import DiagGaussian, MixturePrior
from matnet.layers import (
    Connector,
    Conv,
    Dense,
    BuModule,
    FcBuModule,
    FcMergeModule,
    GruTdModule,
    MergeModule,
    MetaModule,
    TdModule,
)
from matnet.params import GENERATOR_GROUPS, ParamStore, frozen
from matnet.rng import Rng
from matnet.tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

Prior = Union[DiagGaussian, MixturePrior]


class ModelConfig:
    """Architecture of a MatNet

    :param scales: spatial sizes of the meta-modules, finest first, each half the previous
    :param modules: number of module triples per scale
    :param channels: state channels per scale
    :param kind: 'unconditional' or 'conditional'
    :param image_channels: channels of the (square) images
    :param image_size: image height and width, must be scales[0] or 2 * scales[0]
    :param latent_channels: latent feature maps of every spatial module
    :param z0: 'fc' for a fully-connected meta-module on top, 'spatial' to put z_0 at the coarsest scale
    :param fc_modules: number of GRU-style modules in the fully-connected meta-module
    :param fc_units: state size of the fully-connected meta-module
    :param fc_latent: size of the fully-connected latent layers (z_0 included)
    :param likelihood: 'bernoulli', 'diag_gaussian' or 'integrated_logistic'
    :param prior: prior of z_0, 'standard' or 'mixture'
    :param mixture_components: number of mixture components
    :param ar_head: attach the autoregressive output head
    :param ar_layers: masked layers of the head
    :param ar_features: hidden feature maps of the head
    :param slope: leaky ReLU slope
    :param refines: the model is the second stage of a two-stage imputation
    :param init: 'random' or 'zero' parameters
    :param seed: seed of the parameter initialization
    """

    KEYS = (
        "kind",
        "image_channels",
        "image_size",
        "scales",
        "modules",
        "channels",
        "latent_channels",
        "z0",
        "fc_modules",
        "fc_units",
        "fc_latent",
        "likelihood",
        "prior",
        "mixture_components",
        "ar_head",
        "ar_layers",
        "ar_features",
        "slope",
        "refines",
        "init",
        "seed",
    )

    def __init__(
        self,
        scales: Sequence[int],
        modules: Sequence[int],
        channels: Sequence[int],
        kind: str = "unconditional",
        image_channels: int = 1,
        image_size: Optional[int] = None,
        latent_channels: int = 2,
        z0: str = "fc",
        fc_modules: int = 1,
        fc_units: int = 64,
        fc_latent: int = 32,
        likelihood: str = "bernoulli",  # pylint: disable=redefined-outer-name
        prior: str = "standard",
        mixture_components: int = 2,
        ar_head: bool = False,
        ar_layers: int = 5,
        ar_features: int = 16,
        slope: float = 0.1,
        refines: bool = False,
        init: str = "random",
        seed: int = 0,
    ) -> None:
        self.scales = list(scales)
        self.modules = list(modules)
        self.channels = list(channels)
        self.kind = kind
        self.image_channels = image_channels
        self.image_size = image_size or (self.scales[0] if self.scales else 0)
        self.latent_channels = latent_channels
        self.z0 = z0
        self.fc_modules = fc_modules
        self.fc_units = fc_units
        self.fc_latent = fc_latent
        self.likelihood = likelihood
        self.prior = prior
        self.mixture_components = mixture_components
        self.ar_head = ar_head
        self.ar_layers = ar_layers
        self.ar_features = ar_features
        self.slope = slope
        self.refines = refines
        self.init = init
        self.seed = seed
        self.validate()

    def validate(self) -> None:
        """Check consistency of the options

        :raises ValueError: with a description of the first problem found
        """
        if not self.scales:
            raise ValueError("scales: at least one scale is needed")
        if not len(self.scales) == len(self.modules) == len(self.channels):
            raise ValueError("scales, modules and channels must have the same number of entries")
        for fine, coarse in zip(self.scales, self.scales[1:]):
            if fine != 2 * coarse:
                raise ValueError(f"scales: each scale must be half the previous one, got {fine} -> {coarse}")
        if any(s <= 0 for s in self.scales) or any(c <= 0 for c in self.channels):
            raise ValueError("scales and channels must be positive")
        if any(m < 0 for m in self.modules):
            raise ValueError("modules must not be negative")
        if self.image_size not in (self.scales[0], 2 * self.scales[0]):
            raise ValueError(f"image_size {self.image_size} must equal the finest scale or twice it")
        if self.kind not in ("unconditional", "conditional"):
            raise ValueError(f"kind must be 'unconditional' or 'conditional', got '{self.kind}'")
        if self.z0 not in ("fc", "spatial"):
            raise ValueError(f"z0 must be 'fc' or 'spatial', got '{self.z0}'")
        if self.z0 == "spatial" and self.fc_modules:
            raise ValueError("fc_modules must be 0 when z0 is spatial")
        if self.likelihood not in likelihood.KINDS:
            raise ValueError(f"likelihood must be one of {list(likelihood.KINDS)}")
        if self.prior not in ("standard", "mixture"):
            raise ValueError(f"prior must be 'standard' or 'mixture', got '{self.prior}'")
        if self.prior == "mixture" and self.mixture_components < 1:
            raise ValueError("mixture_components must be at least 1")
        if self.prior == "mixture" and self.kind == "conditional":
            raise ValueError("prior: a mixture is only possible for unconditional models")
        if self.refines and self.kind != "conditional":
            raise ValueError("refines is only possible for conditional models")
        if not 0 < self.slope < 1:
            raise ValueError("slope must be in (0, 1)")
        if self.init not in ("random", "zero"):
            raise ValueError(f"init must be 'random' or 'zero', got '{self.init}'")
        for key in ("image_channels", "latent_channels", "fc_units", "fc_latent", "ar_features"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be positive")
        if self.ar_head and self.ar_layers < 2:
            raise ValueError("ar_layers must be at least 2")

    @classmethod
    def from_options(cls, options: Dict) -> "ModelConfig":
        """Build from a (parsed) option dictionary, None values take the defaults"""
        return cls(**{k: v for k, v in options.items() if k in cls.KEYS and v is not None})

    def options(self) -> Dict:
        """All options as dictionary"""
        return {k: getattr(self, k) for k in self.KEYS}

    @property
    def conditional(self) -> bool:
        return self.kind == "conditional"

    @property
    def depth(self) -> int:
        """Number of latent layers below z_0"""
        return sum(self.modules) + (self.fc_modules if self.z0 == "fc" else 0)

    @property
    def num_subpixels(self) -> int:
        return self.image_channels * self.image_size**2


class Observation:
    """Batch of images with an optional mask of known sub-pixels

    :param x: images (b, c, h, w) in [0, 1]
    :param mask: 1 for known, 0 for unknown sub-pixels, only for conditional models
    :param guess: first stage prediction, read at the unknown positions by refining models
    :param soft: data are expectations rather than samples (skips data checks)
    """

    def __init__(
        self,
        x: Union[Tensor, np.ndarray],
        mask: Optional[np.ndarray] = None,
        guess: Optional[np.ndarray] = None,
        soft: bool = False,
    ) -> None:
        self.x = T.as_tensor(x)
        if self.x.ndim != 4:
            raise ShapeError(f"Observations need shape (batch, channels, height, width), got {self.x.shape}")
        if mask is not None:
            mask = np.asarray(mask, dtype=self.x.dtype)
            if mask.shape != self.x.shape:
                raise ShapeError(f"Mask shape {mask.shape} differs from image shape {self.x.shape}")
            if not np.all((mask == 0) | (mask == 1)):
                raise ValueError("Mask values must be 0 or 1")
        if guess is not None:
            guess = np.asarray(guess, dtype=self.x.dtype)
            if guess.shape != self.x.shape:
                raise ShapeError(f"Guess shape {guess.shape} differs from image shape {self.x.shape}")
        self.mask = mask
        self.guess = guess
        self.soft = soft

    def __len__(self) -> int:
        return self.x.shape[0]

    def known(self) -> Tensor:
        """x^k = x * mask"""
        return self.x * self.mask

    def unknown(self) -> Tensor:
        """x^u = x * (1 - mask)"""
        return self.x * (1 - self.mask)

    def subset(self, index) -> "Observation":
        """Rows of the batch selected by index (constant copy)"""
        pick = lambda a: None if a is None else a[index]  # noqa: E731
        return Observation(self.x.data[index], pick(self.mask), pick(self.guess), self.soft)


class LatentLayerRecord:
    """Sampled value and distributions of one latent layer

    :param index: 0 for z_0, i for TD module i
    :param z: sampled value
    :param posterior: approximate posterior, None when sampled from the prior
    :param prior: prior distribution (mixture only for z_0)
    :param kl: per example KL(posterior || prior), None without posterior
    """

    def __init__(self, index: int, z: Tensor, posterior: Optional[DiagGaussian], prior: Prior, kl: Optional[Tensor]):
        self.index = index
        self.z = z
        self.posterior = posterior
        self.prior = prior
        self.kl = kl


class FreeEnergyReport:
    """Terms of the variational bound, per example in nats

    :param recon_nll: reconstruction term
    :param layer_kls: KL of every latent layer, z_0 first
    :param aux: weighted auxiliary scalar losses (e.g. entropy penalty)
    """

    def __init__(self, recon_nll: Tensor, layer_kls: List[Tensor], aux: Optional[Dict[str, Tensor]] = None) -> None:
        self.recon_nll = recon_nll
        self.layer_kls = layer_kls
        self.aux = aux or {}

    @property
    def kl_total(self) -> Tensor:
        total = self.layer_kls[0]
        for kl in self.layer_kls[1:]:
            total = total + kl
        return total

    @property
    def total_bound(self) -> Tensor:
        """Negative ELBO: reconstruction plus all KL terms"""
        return self.recon_nll + self.kl_total

    def loss(self, kl_weight: float = 1.0) -> Tensor:
        """Scalar training loss: batch mean of recon + kl_weight * KL plus auxiliary terms"""
        loss = T.mean(self.recon_nll + self.kl_total * kl_weight)
        for term in self.aux.values():
            loss = loss + term
        return loss

    def layer_means(self) -> np.ndarray:
        """Batch mean KL per layer"""
        return np.array([float(np.mean(kl.data)) for kl in self.layer_kls])


class MatNet:
    """MatNet model with its parameters

    :param config: architecture
    :param store: all parameters, initialized from config.seed
    """

    def __init__(self, config: ModelConfig) -> None:
        self.config = config
        self.store = ParamStore(config.init, Rng(config.seed, stream=0))
        self.like = likelihood.make(config.likelihood, config.image_channels)
        self.metas: List[MetaModule] = []
        self._build()

    @property
    def conditional(self) -> bool:
        return self.config.conditional

    @property
    def depth(self) -> int:
        return self.config.depth

    def _build(self) -> None:
        cfg = self.config
        store = self.store
        slope = cfg.slope
        layer = 1
        if cfg.z0 == "fc":
            fc_layers = list(range(layer, layer + cfg.fc_modules))
            self.metas.append(MetaModule(0, cfg.fc_units, cfg.fc_latent, fc_layers))
            layer += cfg.fc_modules
        for scale, n_mod, width in reversed(list(zip(cfg.scales, cfg.modules, cfg.channels))):
            self.metas.append(MetaModule(scale, width, cfg.latent_channels, list(range(layer, layer + n_mod))))
            layer += n_mod

        c = cfg.image_channels
        extra = c if cfg.refines else 0
        inf_in = (3 * c if cfg.conditional else c) + extra
        gen_in = 2 * c + extra
        last = len(self.metas) - 1
        for m, meta in enumerate(self.metas):
            for i in meta.layers:
                if meta.is_fc:
                    meta.td.append(GruTdModule(store, f"td.{i}", meta.width, meta.latent, slope, not cfg.conditional))
                    meta.bu.append(FcBuModule(store, f"bu.{i}", meta.width, slope))
                    meta.merge.append(FcMergeModule(store, f"merge.{i}", meta.width, meta.latent, slope))
                    if cfg.conditional:
                        meta.bu_gen.append(FcBuModule(store, f"bu_gen.{i}", meta.width, slope, "bu_gen"))
                        meta.merge_gen.append(
                            FcMergeModule(store, f"merge_gen.{i}", meta.width, meta.latent, slope, "merge_gen")
                        )
                else:
                    meta.td.append(TdModule(store, f"td.{i}", meta.width, meta.latent, slope, not cfg.conditional))
                    meta.bu.append(BuModule(store, f"bu.{i}", meta.width, slope))
                    meta.merge.append(
                        MergeModule(store, f"merge.{i}", meta.width, meta.width, meta.width, meta.latent, slope)
                    )
                    if cfg.conditional:
                        meta.bu_gen.append(BuModule(store, f"bu_gen.{i}", meta.width, slope, "bu_gen"))
                        meta.merge_gen.append(
                            MergeModule(
                                store,
                                f"merge_gen.{i}",
                                meta.width,
                                meta.width,
                                meta.width,
                                meta.latent,
                                slope,
                                "merge_gen",
                            )
                        )
            # connectors from the coarser predecessor (TD, merge) and the finer successor (BU)
            if m > 0:
                prev = self.metas[m - 1]
                kind = "from_fc" if prev.is_fc else "up"
                meta.td_in = Connector(store, f"td.conn.{m}", kind, prev.width, meta.width, "td", slope, meta.scale)
                meta.merge_in = Connector(
                    store, f"merge.conn.{m}", kind, prev.width, meta.width, "merge_inf", slope, meta.scale
                )
                if cfg.conditional:
                    meta.merge_gen_in = Connector(
                        store, f"merge_gen.conn.{m}", kind, prev.width, meta.width, "merge_gen", slope, meta.scale
                    )
            if m < last:
                nxt = self.metas[m + 1]
                kind = "to_fc" if meta.is_fc else "down"
                meta.bu_in = Connector(store, f"bu.conn.{m}", kind, nxt.width, meta.width, "bu_inf", slope, nxt.scale)
                if cfg.conditional:
                    meta.bu_gen_in = Connector(
                        store, f"bu_gen.conn.{m}", kind, nxt.width, meta.width, "bu_gen", slope, nxt.scale
                    )
            else:
                kind = "same" if cfg.image_size == meta.scale else "down"
                meta.bu_in = Connector(store, "bu.readin", kind, inf_in, meta.width, "bu_inf", slope)
                if cfg.conditional:
                    meta.bu_gen_in = Connector(store, "bu_gen.readin", kind, gen_in, meta.width, "bu_gen", slope)

        top = self.metas[0]
        self.z0_shape = top.latent_shape(1)[1:]
        if top.is_fc:
            self.td_entry = Dense(store, "td.entry", top.latent, top.width, "td")
            self.z0_posterior = Dense(store, "z0.posterior", top.width, 2 * top.latent, "bu_inf", "zeros")
            if cfg.conditional:
                self.z0_cond_prior = Dense(store, "z0.prior", top.width, 2 * top.latent, "bu_gen", "zeros")
        else:
            self.td_entry = Conv(store, "td.entry", top.latent, top.width, "td")
            self.z0_posterior = Conv(store, "z0.posterior", top.width, 2 * top.latent, "bu_inf", "zeros")
            if cfg.conditional:
                self.z0_cond_prior = Conv(store, "z0.prior", top.width, 2 * top.latent, "bu_gen", "zeros")
        self.mixture_params: List[Tuple[str, str]] = []
        if cfg.prior == "mixture":
            for k in range(cfg.mixture_components):
                mu, log_var = f"prior.{k}.mu", f"prior.{k}.log_var"
                store.add(mu, (1,) + self.z0_shape, "td", "normal")
                store.add(log_var, (1,) + self.z0_shape, "td", "zeros")
                self.mixture_params.append((mu, log_var))

        finest = self.metas[-1]
        self.to_image: Optional[Connector] = None
        if cfg.image_size != finest.scale:
            self.to_image = Connector(store, "td.to_image", "up", finest.width, finest.width, "td", slope)
        self.head: Optional[ArHead] = None
        self.out: Optional[Conv] = None
        if cfg.ar_head:
            self.head = ArHead(store, c, finest.width, self.like, cfg.ar_layers, cfg.ar_features, slope)
        else:
            self.out = Conv(store, "td.out", finest.width, self.like.n_features, "td")

    # helpers for the passes

    def _check_obs(self, obs: Observation) -> None:
        cfg = self.config
        expected = (cfg.image_channels, cfg.image_size, cfg.image_size)
        if obs.x.shape[1:] != expected:
            raise ShapeError(f"Model expects images of shape {expected}, got {obs.x.shape[1:]}")
        if self.conditional and obs.mask is None:
            raise ValueError("Conditional models need observations with a mask")
        if cfg.refines and obs.guess is None:
            raise ValueError("Refining models need a first stage guess")

    def _inputs(self, obs: Observation) -> Tuple[Tensor, Optional[Tensor]]:
        """Inputs of the inference and generator BU paths"""
        if not self.conditional:
            return obs.x, None
        mask = Tensor(obs.mask)
        x_k = obs.known()
        extra = [Tensor(obs.guess * (1 - obs.mask))] if self.config.refines else []
        inf_input = T.concat_features([x_k, obs.unknown(), mask] + extra)
        gen_input = T.concat_features([x_k, mask] + extra)
        return inf_input, gen_input

    def _bottom_up(self, h: Tensor, generator: bool = False) -> Tuple[List[Tensor], Tensor]:
        """Run a BU path, return the state after each module (index i - 1) and the top state"""
        states: List[Optional[Tensor]] = [None] * self.depth
        for meta in reversed(self.metas):
            connector = meta.bu_gen_in if generator else meta.bu_in
            h = connector(h)
            modules = meta.bu_gen if generator else meta.bu
            for i, module in reversed(list(zip(meta.layers, modules))):
                h = module.forward(h)
                states[i - 1] = h
        return states, h  # type: ignore

    def z0_prior(self, n: int, gen_top: Optional[Tensor] = None) -> Prior:
        """Prior of z_0, conditioned on the generator BU top state for conditional models"""
        if self.conditional:
            return DiagGaussian.from_features(self.z0_cond_prior(gen_top))
        if self.config.prior == "mixture":
            return MixturePrior(
                [DiagGaussian(self.store.get(mu), self.store.get(lv)) for mu, lv in self.mixture_params]
            )
        return DiagGaussian.standard((n,) + self.z0_shape)

    def _draw(self, dist: Prior, n: int, rng: Rng) -> Tensor:
        if isinstance(dist, MixturePrior):
            return dist.sample(n, rng)
        return distributions.reparam_sample(dist, rng.normal(dist.shape))

    def _top_down(
        self,
        n: int,
        rng: Rng,
        inference: Optional[Tuple[List[Tensor], Tensor]] = None,
        generator: Optional[Tuple[List[Tensor], Tensor]] = None,
        latents: Optional[Sequence] = None,
    ) -> Tuple[List[LatentLayerRecord], Tensor]:
        """TD pass, with posteriors if the inference BU states are given"""
        latents = latents or []

        def given(index: int) -> Optional[Tensor]:
            if index < len(latents) and latents[index] is not None:
                return T.stop_gradient(latents[index])
            return None

        records: List[LatentLayerRecord] = []
        prior0 = self.z0_prior(n, generator[1] if generator else None)
        q0, kl0 = None, None
        z0 = given(0)
        if inference is not None:
            q0 = DiagGaussian.from_features(self.z0_posterior(inference[1]))
            if z0 is None:
                z0 = self._draw(q0, n, rng)
            if isinstance(prior0, MixturePrior):
                kl0 = distributions.kl_mixture_approx(q0, prior0)
            else:
                kl0 = distributions.kl_diag_gauss(q0, prior0)
        elif z0 is None:
            z0 = self._draw(prior0, n, rng)
        records.append(LatentLayerRecord(0, z0, q0, prior0, kl0))

        h_t = T.lrelu(self.td_entry(z0), self.config.slope)
        h_m = self.metas[0].zero_state(n) if inference is not None else None
        h_g = self.metas[0].zero_state(n) if generator is not None else None
        for m, meta in enumerate(self.metas):
            if m > 0:
                h_t = meta.td_in(h_t)
                if h_m is not None:
                    h_m = meta.merge_in(h_m)
                if h_g is not None:
                    h_g = meta.merge_gen_in(h_g)
            for j, i in enumerate(meta.layers):
                if generator is not None:
                    prior, h_g = meta.merge_gen[j].forward(h_g, generator[0][i - 1], h_t)
                else:
                    prior = meta.td[j].prior(h_t)
                z = given(i)
                post, kl = None, None
                if inference is not None:
                    post, h_m = meta.merge[j].forward(h_m, inference[0][i - 1], h_t)
                    if z is None:
                        z = self._draw(post, n, rng)
                    kl = distributions.kl_diag_gauss(post, prior)
                elif z is None:
                    z = self._draw(prior, n, rng)
                records.append(LatentLayerRecord(i, z, post, prior, kl))
                h_t = meta.td[j].forward(h_t, z)
        td_out = self.to_image(h_t) if self.to_image is not None else h_t
        return records, td_out

    def _reconstruction(self, obs: Observation, td_out: Tensor) -> Tensor:
        weight = None if obs.mask is None or not self.conditional else 1 - obs.mask
        check = not obs.soft
        if self.head is not None:
            return ar_nll(self.head, obs.x, td_out, weight, check)
        return self.like.nll(self.out(td_out), obs.x, weight, check)

    # public operations

    def infer(
        self, obs: Observation, rng: Rng, latents: Optional[Sequence] = None
    ) -> Tuple[List[LatentLayerRecord], Tensor]:
        """Sample all latent layers from the approximate posterior

        :return (records, td_out): d + 1 latent records and the final TD state
        """
        self._check_obs(obs)
        inf_input, gen_input = self._inputs(obs)
        inference = self._bottom_up(inf_input)
        generator = self._bottom_up(gen_input, generator=True) if self.conditional else None
        return self._top_down(len(obs), rng, inference, generator, latents)

    def prior_trace(
        self, condition: Optional[Observation], rng: Rng, n: int = 0, latents: Optional[Sequence] = None
    ) -> Tuple[List[LatentLayerRecord], List[Tensor], Tensor]:
        """Generator side pass on the active tape

        :return (records, generator_states, params): latent records with their
            priors, the generator BU states (empty for unconditional models)
            and the output parameters (final TD state with an AR head)
        """
        generator = None
        if self.conditional:
            if condition is None:
                raise ValueError("Conditional models need a condition to generate")
            self._check_obs(condition)
            n = len(condition)
            generator = self._bottom_up(self._inputs(condition)[1], generator=True)
        records, td_out = self._top_down(n, rng, None, generator, latents)
        params = td_out if self.head is not None else self.out(td_out)
        return records, (generator[0] if generator else []), params

    def generate(
        self,
        n: int,
        rng: Rng,
        condition: Optional[Observation] = None,
        use_mean: bool = False,
        latents: Optional[Sequence] = None,
    ) -> np.ndarray:
        """Ancestral sampling of images

        For conditional models the known sub-pixels of the condition are
        copied into the result, only unknown ones are generated. With the AR
        head use_mean has no effect.

        :param n: number of images (ignored for conditional models)
        :param use_mean: return the mean of the output distribution instead of a sample
        :param latents: fixed values for the first latent layers
        """
        with T.suspended():
            records, _, params = self.prior_trace(condition, rng, n, latents)
            if self.head is not None:
                known = condition.x.data if condition is not None else None
                mask = condition.mask if condition is not None else None
                x, _ = ar_sample(self.head, params, rng, known, mask)
            elif use_mean:
                x = self.like.mean(params)
            else:
                x = self.like.sample(params, rng)
        if self.conditional:
            x = np.where(condition.mask > 0, condition.x.data, x)
        return np.asarray(x, dtype=T.default_dtype())

    def free_energy(
        self, obs: Observation, rng: Rng, mc_samples: int = 1, entropy_weight: float = 0.0
    ) -> FreeEnergyReport:
        """Monte-Carlo estimate of the variational bound

        :param mc_samples: number of posterior samples to average over
        :param entropy_weight: weight of the mixture responsibility entropy penalty
        """
        if mc_samples < 1:
            raise ValueError(f"mc_samples must be at least 1, got {mc_samples}")
        recon, kls, entropy = None, None, None
        for _ in range(mc_samples):
            records, td_out = self.infer(obs, rng)
            r = self._reconstruction(obs, td_out)
            recon = r if recon is None else recon + r
            layer = [rec.kl for rec in records]
            kls = layer if kls is None else [a + b for a, b in zip(kls, layer)]
            if entropy_weight > 0 and isinstance(records[0].prior, MixturePrior):
                resp = distributions.mixture_responsibilities(records[0].posterior, records[0].prior)
                e = distributions.entropy_penalty(resp)
                entropy = e if entropy is None else entropy + e
        scale = 1.0 / mc_samples
        aux = {}
        if entropy is not None:
            aux["entropy"] = entropy * (entropy_weight * scale)
        if mc_samples == 1:
            return FreeEnergyReport(recon, kls, aux)
        return FreeEnergyReport(recon * scale, [kl * scale for kl in kls], aux)

    def log_weights(self, obs: Observation, rng: Rng) -> np.ndarray:
        """One importance weight log p(x, z) - log q(z | x) per example"""
        with T.suspended():
            records, td_out = self.infer(obs, rng)
            lw = -self._reconstruction(obs, td_out).data.astype(np.float64)
            for rec in records:
                lw -= rec.posterior.log_prob(rec.z).data - rec.prior.log_prob(rec.z).data
        return lw

    def eval_nll_per_example(self, obs: Observation, k: int, rng: Rng) -> np.ndarray:
        """Importance weighted NLL estimate with k samples per example"""
        if k < 1:
            raise ValueError(f"Number of importance samples must be at least 1, got {k}")
        weights = np.stack([self.log_weights(obs, rng) for _ in range(k)], axis=1)
        with T.precision(64):
            return -distributions.iwae_bound(weights).data

    def eval_nll(self, obs: Observation, k: int, rng: Rng) -> float:
        """Mean importance weighted NLL estimate in nats"""
        return float(np.mean(self.eval_nll_per_example(obs, k, rng)))

    def inference_regularizer(
        self, n: int, rng: Rng, condition: Optional[Observation] = None, hard: bool = False
    ) -> Tensor:
        """Free energy of model samples, differentiable only w.r.t. inference parameters

        The samples are drawn with gradients cut and all generator-side
        parameters are read as constants, so the result trains q alone.

        :param hard: score sampled images instead of the output means
        """
        with frozen(*GENERATOR_GROUPS):
            x = self.generate(n, rng, condition, use_mean=not hard)
            if self.conditional:
                obs = Observation(x, condition.mask, condition.guess, soft=not hard)
            else:
                obs = Observation(x, soft=not hard)
            report = self.free_energy(obs, rng)
            return T.mean(report.total_bound)

    def resample_from_depth(self, obs: Observation, keep: int, rng: Rng, use_mean: bool = True) -> np.ndarray:
        """Keep the first keep latent layers of the posterior, resample the rest from the model"""
        if not 0 <= keep <= self.depth + 1:
            raise ValueError(f"keep must be within [0, {self.depth + 1}], got {keep}")
        with T.suspended():
            records, _ = self.infer(obs, rng)
        latents = [r.z for r in records[:keep]]
        return self.generate(len(obs), rng, obs if self.conditional else None, use_mean, latents)

    def mixture_assignments(self, obs: Observation) -> np.ndarray:
        """Most responsible mixture component of q(z_0 | x) per example"""
        if self.config.prior != "mixture" or self.conditional:
            raise ValueError("Mixture assignments need an unconditional model with mixture prior")
        self._check_obs(obs)
        with T.suspended():
            _, top = self._bottom_up(self._inputs(obs)[0])
            q0 = DiagGaussian.from_features(self.z0_posterior(top))
            resp = distributions.mixture_responsibilities(q0, self.z0_prior(len(obs)))
        return np.argmax(resp.data, axis=1)

    def layer_groups(self) -> List[str]:
        """Meta-module label of every latent layer, z_0 first"""
        labels = ["top"]
        for meta in self.metas:
            name = "fc" if meta.is_fc else f"{meta.scale}x{meta.scale}"
            labels += [name] * len(meta.layers)
        return labels


def impute_two_stage(stage1: MatNet, stage2: MatNet, obs: Observation, rng: Rng, use_mean: bool = False) -> np.ndarray:
    """Fill unknown pixels with stage1 and refine the result with stage2

    :raises ValueError: unless both models are conditional, stage2 refines and shapes agree
    """
    if not (stage1.conditional and stage2.conditional):
        raise ValueError("Two-stage imputation needs two conditional models")
    if not stage2.config.refines:
        raise ValueError("The second stage model must be configured with refines")
    shape1 = (stage1.config.image_channels, stage1.config.image_size)
    shape2 = (stage2.config.image_channels, stage2.config.image_size)
    if shape1 != shape2:
        raise ValueError("Both stages must work on images of the same shape")
    guess = stage1.generate(len(obs), rng, Observation(obs.x, obs.mask), use_mean)
    return stage2.generate(len(obs), rng, Observation(obs.x, obs.mask, guess), use_mean)


def save_checkpoint(path: str, net: MatNet, config_text: str, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write parameters (and optimizer state) with the effective configuration as manifest"""
    tensors = net.store.arrays()
    if extra:
        tensors.update(extra)
    archive.save_archive(path, tensors, manifest=config_text)
    log.info("Wrote checkpoint '%s'", path)


def load_checkpoint(path: str, overrides: Optional[Dict[str, str]] = None) -> Tuple[MatNet, Dict, Dict[str, np.ndarray]]:
    """Restore a model from a checkpoint

    :param overrides: option strings replacing manifest values (for example the seed)
    :return (net, options, extra): the model, all options of the manifest and
                                   the entries that are no model parameters
    :raises DataError: for a missing manifest
    :raises ShapeError: if stored parameters do not fit the configured model
    """
    tensors, manifest = archive.load_archive(path)
    if manifest is None:
        raise archive.DataError(f"Checkpoint '{path}' has no manifest")
    options = inputparser.Input(text=manifest, overrides=overrides).options()
    net = MatNet(ModelConfig.from_options(options))
    params = {k: v for k, v in tensors.items() if k in net.store}
    extra = {k: v for k, v in tensors.items() if k not in net.store}
    unexpected = [k for k in extra if not k.startswith("opt.")]
    if unexpected:
        raise ShapeError(f"Checkpoint has entries unknown to the model: {', '.join(unexpected)}")
    net.store.load(params)
    return net, options, extra
