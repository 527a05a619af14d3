"""Building blocks of the hierarchical models

Convolutional modules work on states of shape (b, c, s, s) and keep that
shape. Their fully-connected counterparts work on (b, n). All parameters live
in a ParamStore; the module objects only remember the parameter names.
"""

from typing import List, Optional, Tuple

import numpy as np

from matnet import tensor as T
from matnet.distributions import DiagGaussian
from matnet.params import ParamStore
from matnet.tensor import ShapeError, Tensor

KERNEL_SIZE = 3
RESIDUAL_SCALE = 0.5  # initialization scale of the residual output convolutions


class Conv:
    """Shape-preserving convolution with bias

    :param init: 'he' or 'zeros' for the kernel, biases always start at zero
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        c_in: int,
        c_out: int,
        group: str,
        init: str = "he",
        scale: float = 1.0,
        k: int = KERNEL_SIZE,
    ) -> None:
        self.store = store
        self.kernel = f"{name}.kernel"
        self.bias = f"{name}.bias"
        store.add(self.kernel, (c_out, c_in, k, k), group, init, scale)
        store.add(self.bias, (c_out,), group, "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d_same(x, self.store.get(self.kernel), self.store.get(self.bias))


class Dense:
    """Affine map of (b, n) inputs"""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        n_in: int,
        n_out: int,
        group: str,
        init: str = "he",
        scale: float = 1.0,
        bias: float = 0.0,
    ) -> None:
        self.store = store
        self.weight = f"{name}.weight"
        self.bias = f"{name}.bias"
        store.add(self.weight, (n_out, n_in), group, init, scale)
        store.add(self.bias, (n_out,), group, "constant", value=bias)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.store.get(self.weight), self.store.get(self.bias))


def _check_spatial(a: Tensor, b: Tensor, what: str) -> None:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} do not share batch and spatial dims")


def _check_fc(*tensors: Tensor) -> None:
    for t in tensors:
        if t.ndim != 2:
            raise ShapeError(f"Fully-connected modules need (batch, units) states, got {t.shape}")


class TdModule:
    """Top-down module with a stochastic residual update

    h' = lrelu(h + conv_w(lrelu(conv_v([h; z]))))

    :param prior_readout: create the readout of p(z | h), not needed when the
                          prior comes from a generator-side merge module
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        channels: int,
        latent: int,
        slope: float,
        prior_readout: bool = True,
    ) -> None:
        self.channels = channels
        self.latent = latent
        self.slope = slope
        self.v = Conv(store, f"{name}.v", channels + latent, channels, "td")
        self.w = Conv(store, f"{name}.w", channels, channels, "td", scale=RESIDUAL_SCALE)
        self.pv: Optional[Conv] = None
        self.pw: Optional[Conv] = None
        if prior_readout:
            self.pv = Conv(store, f"{name}.prior_v", channels, channels, "td")
            self.pw = Conv(store, f"{name}.prior_w", channels, 2 * latent, "td", "zeros")

    def forward(self, h_t: Tensor, z: Tensor) -> Tensor:
        _check_spatial(h_t, z, "td_forward")
        inner = T.lrelu(self.v(T.concat_features([h_t, z])), self.slope)
        return T.lrelu(h_t + self.w(inner), self.slope)

    def prior(self, h_t: Tensor) -> DiagGaussian:
        """p(z | h_t) as [mu; log_var] = conv(lrelu(conv(h_t)))"""
        if self.pv is None or self.pw is None:
            raise RuntimeError("Module was built without prior readout")
        return DiagGaussian.from_features(self.pw(T.lrelu(self.pv(h_t), self.slope)))


class BuModule:
    """Bottom-up residual module h' = lrelu(h + conv_w(lrelu(conv_v(h))))"""

    def __init__(self, store: ParamStore, name: str, channels: int, slope: float, group: str = "bu_inf") -> None:
        self.slope = slope
        self.v = Conv(store, f"{name}.v", channels, channels, group)
        self.w = Conv(store, f"{name}.w", channels, channels, group, scale=RESIDUAL_SCALE)

    def forward(self, h_b: Tensor) -> Tensor:
        return T.lrelu(h_b + self.w(T.lrelu(self.v(h_b), self.slope)), self.slope)


class MergeModule:
    """Merge module combining merge, bottom-up and top-down states

    h_m' = lrelu(h_m + conv_v(lrelu(conv_u([h_m; h_b; h_t]))))
    [mu; log_var] = conv_w(h_m')
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        c_merge: int,
        c_bu: int,
        c_td: int,
        latent: int,
        slope: float,
        group: str = "merge_inf",
    ) -> None:
        self.latent = latent
        self.slope = slope
        self.u = Conv(store, f"{name}.u", c_merge + c_bu + c_td, c_merge, group)
        self.v = Conv(store, f"{name}.v", c_merge, c_merge, group, scale=RESIDUAL_SCALE)
        self.w = Conv(store, f"{name}.w", c_merge, 2 * latent, group, "zeros")

    def forward(self, h_m: Tensor, h_b: Tensor, h_t: Tensor) -> Tuple[DiagGaussian, Tensor]:
        _check_spatial(h_m, h_b, "merge_forward")
        _check_spatial(h_m, h_t, "merge_forward")
        inner = T.lrelu(self.u(T.concat_features([h_m, h_b, h_t])), self.slope)
        h_new = T.lrelu(h_m + self.v(inner), self.slope)
        return DiagGaussian.from_features(self.w(h_new)), h_new


class GruTdModule:
    """Fully-connected top-down module with a stochastic GRU-style update

    r = sigmoid(W_r [h; z]), u = sigmoid(W_u [h; z])
    c = tanh(W_c [r * h; z])
    h' = u * h + (1 - u) * c

    The update gate bias starts at +1 so a fresh module stays close to the identity.
    """

    def __init__(
        self,
        store: ParamStore,
        name: str,
        units: int,
        latent: int,
        slope: float,
        prior_readout: bool = True,
    ) -> None:
        self.units = units
        self.latent = latent
        self.slope = slope
        self.reset = Dense(store, f"{name}.reset", units + latent, units, "td")
        self.update = Dense(store, f"{name}.update", units + latent, units, "td", bias=1.0)
        self.candidate = Dense(store, f"{name}.candidate", units + latent, units, "td")
        self.pv: Optional[Dense] = None
        self.pw: Optional[Dense] = None
        if prior_readout:
            self.pv = Dense(store, f"{name}.prior_v", units, units, "td")
            self.pw = Dense(store, f"{name}.prior_w", units, 2 * latent, "td", "zeros")

    def forward(self, h_t: Tensor, z: Tensor) -> Tensor:
        _check_fc(h_t, z)
        hz = T.concat_features([h_t, z])
        r = T.sigmoid(self.reset(hz))
        u = T.sigmoid(self.update(hz))
        c = T.tanh(self.candidate(T.concat_features([r * h_t, z])))
        return u * h_t + (1.0 - u) * c

    def prior(self, h_t: Tensor) -> DiagGaussian:
        _check_fc(h_t)
        if self.pv is None or self.pw is None:
            raise RuntimeError("Module was built without prior readout")
        return DiagGaussian.from_features(self.pw(T.lrelu(self.pv(h_t), self.slope)))


class FcBuModule:
    """Fully-connected residual bottom-up module"""

    def __init__(self, store: ParamStore, name: str, units: int, slope: float, group: str = "bu_inf") -> None:
        self.slope = slope
        self.v = Dense(store, f"{name}.v", units, units, group)
        self.w = Dense(store, f"{name}.w", units, units, group, scale=RESIDUAL_SCALE)

    def forward(self, h_b: Tensor) -> Tensor:
        _check_fc(h_b)
        return T.lrelu(h_b + self.w(T.lrelu(self.v(h_b), self.slope)), self.slope)


class FcMergeModule:
    """Fully-connected merge module, same update as MergeModule with dense maps"""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        units: int,
        latent: int,
        slope: float,
        group: str = "merge_inf",
    ) -> None:
        self.slope = slope
        self.u = Dense(store, f"{name}.u", 3 * units, units, group)
        self.v = Dense(store, f"{name}.v", units, units, group, scale=RESIDUAL_SCALE)
        self.w = Dense(store, f"{name}.w", units, 2 * latent, group, "zeros")

    def forward(self, h_m: Tensor, h_b: Tensor, h_t: Tensor) -> Tuple[DiagGaussian, Tensor]:
        _check_fc(h_m, h_b, h_t)
        inner = T.lrelu(self.u(T.concat_features([h_m, h_b, h_t])), self.slope)
        h_new = T.lrelu(h_m + self.v(inner), self.slope)
        return DiagGaussian.from_features(self.w(h_new)), h_new


class Connector:
    """Map a state between two meta-modules, followed by lrelu

    Kinds:

    * down: stride-2 convolution, halves the spatial size
    * up: transposed stride-2 convolution, doubles the spatial size
    * same: shape-preserving convolution (changes only the feature count)
    * to_fc: flatten (b, c, s, s) and map densely to (b, n)
    * from_fc: map (b, n) densely to (b, c * s * s) and reshape to (b, c, s, s)

    :param size: spatial size s of the spatial side (only for to_fc / from_fc)
    """

    KINDS = ("down", "up", "same", "to_fc", "from_fc")

    def __init__(
        self,
        store: ParamStore,
        name: str,
        kind: str,
        n_in: int,
        n_out: int,
        group: str,
        slope: float,
        size: int = 0,
    ) -> None:
        if kind not in Connector.KINDS:
            raise ValueError(f"Unknown connector kind '{kind}'")
        self.kind = kind
        self.slope = slope
        self.store = store
        self.n_out = n_out
        self.size = size
        if kind in ("down", "up"):
            self.kernel = f"{name}.kernel"
            self.bias = f"{name}.bias"
            store.add(self.kernel, (n_out, n_in, KERNEL_SIZE, KERNEL_SIZE), group)
            store.add(self.bias, (n_out,), group, "zeros")
        elif kind == "same":
            self.conv = Conv(store, name, n_in, n_out, group)
        elif kind == "to_fc":
            self.dense = Dense(store, name, n_in * size * size, n_out, group)
        else:
            self.dense = Dense(store, name, n_in, n_out * size * size, group)

    def __call__(self, h: Tensor) -> Tensor:
        if self.kind in ("down", "up"):
            out = T.strided_resample(h, self.kind, self.store.get(self.kernel), self.store.get(self.bias))
        elif self.kind == "same":
            out = self.conv(h)
        elif self.kind == "to_fc":
            out = self.dense(T.reshape(h, (h.shape[0], -1)))
        else:
            _check_fc(h)
            out = T.reshape(self.dense(h), (h.shape[0], self.n_out, self.size, self.size))
        return T.lrelu(out, self.slope)


def connect_scales(connector: Connector, h: Tensor) -> Tensor:
    """Move a state to the next meta-module"""
    return connector(h)


class MetaModule:
    """Group of module triples sharing one state shape

    :param scale: spatial size, 0 for the fully-connected meta-module
    :param width: channels (spatial) or units (fully-connected) of all states
    :param layers: indices of the latent layers in generation order (1-based)
    """

    def __init__(self, scale: int, width: int, latent: int, layers: List[int]) -> None:
        self.scale = scale
        self.width = width
        self.latent = latent
        self.layers = layers
        self.td: List = []
        self.bu: List = []
        self.merge: List = []
        self.bu_gen: List = []
        self.merge_gen: List = []
        # connectors into this meta-module, None where there is no predecessor
        self.td_in: Optional[Connector] = None
        self.bu_in: Optional[Connector] = None
        self.bu_gen_in: Optional[Connector] = None
        self.merge_in: Optional[Connector] = None
        self.merge_gen_in: Optional[Connector] = None

    @property
    def is_fc(self) -> bool:
        return self.scale == 0

    def state_shape(self, n: int) -> Tuple[int, ...]:
        """Shape of a batch of n states"""
        if self.is_fc:
            return (n, self.width)
        return (n, self.width, self.scale, self.scale)

    def latent_shape(self, n: int) -> Tuple[int, ...]:
        if self.is_fc:
            return (n, self.latent)
        return (n, self.latent, self.scale, self.scale)

    def zero_state(self, n: int) -> Tensor:
        return Tensor(np.zeros(self.state_shape(n), dtype=T.default_dtype()))
