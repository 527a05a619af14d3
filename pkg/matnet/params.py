"""Named parameter collection of a model

Parameters are partitioned into groups so that parts of a model can be frozen
(their values are read as constants) or updated separately:

* td: top-down generator modules, connectors and readouts, the z_0 prior
* bu_inf / merge_inf: inference-side bottom-up and merge modules
* bu_gen / merge_gen: generator-side bottom-up and merge modules (conditional models)
* ar: autoregressive output head
"""

import contextlib
import threading
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from matnet.rng import Rng
from matnet.tensor import ShapeError, Tensor

GROUPS = ("td", "bu_inf", "merge_inf", "bu_gen", "merge_gen", "ar")
INFERENCE_GROUPS = ("bu_inf", "merge_inf")
GENERATOR_GROUPS = ("td", "bu_gen", "merge_gen", "ar")

_local = threading.local()


@contextlib.contextmanager
def frozen(*groups: str) -> Iterator[None]:
    """Read parameters of the given groups as constants in this thread"""
    previous = getattr(_local, "frozen", frozenset())
    _local.frozen = previous | frozenset(groups)
    try:
        yield
    finally:
        _local.frozen = previous


def frozen_groups() -> frozenset:
    return getattr(_local, "frozen", frozenset())


class ParamStore:
    """Ordered mapping from parameter name to tensor

    :param init: 'random' for He initialization, 'zero' for all zero parameters
    :param rng: random stream used by add() for random initialization
    """

    def __init__(self, init: str = "random", rng: Optional[Rng] = None) -> None:
        if init not in ("random", "zero"):
            raise ValueError(f"Unknown initialization '{init}'")
        self.init = init
        self.rng = rng or Rng(0)
        self.params: Dict[str, Tensor] = {}
        self.groups: Dict[str, str] = {}

    def __len__(self) -> int:
        return len(self.params)

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def add(self, name: str, shape: Sequence[int], group: str, kind: str = "he", scale: float = 1.0, value: float = 0.0) -> Tensor:
        """Create a new parameter

        :param kind: 'he' for N(0, 2 / fan_in) * scale, 'normal' for N(0, scale^2),
                     'zeros' or 'constant' (filled with value)
        :param scale: factor on the random initialization
        :raises ValueError: for duplicate names or unknown groups
        """
        if name in self.params:
            raise ValueError(f"Parameter '{name}' already exists")
        if group not in GROUPS:
            raise ValueError(f"Unknown parameter group '{group}'")
        shape = tuple(shape)
        if kind == "he" and self.init == "random":
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            data = self.rng.normal(shape) * np.sqrt(2.0 / fan_in) * scale
        elif kind == "normal" and self.init == "random":
            data = self.rng.normal(shape) * scale
        elif kind == "constant" and self.init == "random":
            data = np.full(shape, value)
        else:
            data = np.zeros(shape)
        param = Tensor(data, requires_grad=True)
        self.params[name] = param
        self.groups[name] = group
        return param

    def get(self, name: str) -> Tensor:
        """Return the parameter, or a constant copy if its group is frozen"""
        param = self.params[name]
        if self.groups[name] in frozen_groups():
            return Tensor(param.data)
        return param

    def names(self, groups: Optional[Sequence[str]] = None) -> List[str]:
        """Parameter names in creation order, optionally restricted to groups"""
        return [n for n in self.params if groups is None or self.groups[n] in groups]

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.params.items())

    def arrays(self) -> Dict[str, np.ndarray]:
        """name -> array for saving"""
        return {n: p.data for n, p in self.params.items()}

    def zero_(self) -> None:
        """Set all parameters to zero (neutral state)"""
        for p in self.params.values():
            p.data = np.zeros_like(p.data)

    def load(self, arrays: Dict[str, np.ndarray]) -> None:
        """Replace all values, names and shapes have to agree exactly

        :raises ShapeError: for missing names or shape differences
        """
        missing = [n for n in self.params if n not in arrays]
        if missing:
            raise ShapeError(f"Missing parameters: {', '.join(missing)}")
        for name, param in self.params.items():
            value = np.asarray(arrays[name])
            if value.shape != param.shape:
                raise ShapeError(f"Parameter '{name}' has shape {value.shape}, expected {param.shape}")
        for name, param in self.params.items():
            param.data = np.array(arrays[name], dtype=param.dtype)

    def count(self) -> int:
        """Total number of scalar parameters"""
        return int(sum(p.data.size for p in self.params.values()))
