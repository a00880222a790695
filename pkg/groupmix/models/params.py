"""
Named parameter storage and initialization.
"""
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple
import logging
import zlib

import numpy as np
from scipy.stats import truncnorm

from ..core.errors import ConfigurationError, DimensionError
from ..core.rng import make_rng
from ..core.tensor import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class Init(str, Enum):
    TRUNC_NORMAL = "trunc_normal"
    ZEROS = "zeros"
    ONES = "ones"


@dataclass(frozen=True)
class ParamSpec:
    """Name, shape and initializer of one learnable tensor."""
    name: str
    shape: Tuple[int, ...]
    init: Init = Init.TRUNC_NORMAL

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class LayerInfo:
    """
    One costed module: its path, the tensors it owns and its multiply-adds
    for a single sample.
    """
    path: str
    specs: Tuple[ParamSpec, ...] = ()
    macs: int = 0

    @property
    def params(self) -> int:
        return sum(spec.size for spec in self.specs)

    def rooted(self, prefix: str) -> "LayerInfo":
        return LayerInfo(
            path=f"{prefix}.{self.path}" if prefix else self.path,
            specs=tuple(prefixed(prefix, self.specs)),
            macs=self.macs,
        )


def weight(name: str, *shape: int) -> ParamSpec:
    return ParamSpec(name, tuple(shape), Init.TRUNC_NORMAL)


def bias(name: str, size: int) -> ParamSpec:
    return ParamSpec(name, (size,), Init.ZEROS)


def norm(prefix: str, size: int) -> List[ParamSpec]:
    return [ParamSpec(f"{prefix}.weight", (size,), Init.ONES), ParamSpec(f"{prefix}.bias", (size,), Init.ZEROS)]


def init_array(spec: ParamSpec, seed: int) -> np.ndarray:
    """
    Draw the initial value of one tensor.

    Each tensor has its own stream keyed by its name, so two configs that
    share a parameter path start from the same values.
    """
    if spec.init == Init.ZEROS:
        return np.zeros(spec.shape)
    if spec.init == Init.ONES:
        return np.ones(spec.shape)
    rng = make_rng(seed, "init", zlib.crc32(spec.name.encode("utf-8")))
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=INIT_STD, size=spec.shape, random_state=rng)


class ParamStore:
    """
    Ordered, named collection of learnable tensors.

    Names are dotted module paths (``stages.0.blocks.1.gma.qkv.weight``);
    insertion order is the construction order of the model.
    """

    def __init__(self, tensors: Optional[Mapping[str, Tensor]] = None):
        self._tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, tensor in (tensors or {}).items():
            self.add(name, tensor)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        tensor.name = name
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._tensors.items()

    def num_params(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for tensor in self._tensors.values():
            tensor.zero_grad()

    def arrays(self) -> Dict[str, np.ndarray]:
        """Copy of every tensor's data, keyed by name."""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def assign(self, arrays: Mapping[str, np.ndarray]):
        """
        Overwrite parameter values in place.

        Every name must exist with an identical shape; nothing is written
        unless all entries validate.

        Raises:
            DimensionError: Naming the first unknown or mismatching tensor
        """
        for name, array in arrays.items():
            if name not in self._tensors:
                raise DimensionError(f"unknown parameter {name!r}")
            if tuple(array.shape) != self._tensors[name].shape:
                raise DimensionError(
                    f"parameter {name!r}: shape {tuple(array.shape)} does not match {self._tensors[name].shape}"
                )
        for name, array in arrays.items():
            self._tensors[name].data[...] = array

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)


class ParamScope:
    """View of a ParamStore under a dotted prefix."""

    def __init__(self, store: ParamStore, prefix: str = ""):
        self.store = store
        self.prefix = prefix

    def path(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self.path(name)]

    def __contains__(self, name: str) -> bool:
        return self.path(name) in self.store

    def child(self, name: str) -> "ParamScope":
        return ParamScope(self.store, self.path(name))


def materialize(specs: Iterable[ParamSpec], seed: int) -> ParamStore:
    """Create a ParamStore holding freshly initialized tensors for ``specs``."""
    store = ParamStore()
    for spec in specs:
        store.add(spec.name, Tensor.wrap(init_array(spec, seed)))
    logger.debug(f"Materialized {len(store)} tensors, {store.num_params()} scalars")
    return store


def prefixed(prefix: str, specs: Iterable[ParamSpec]) -> List[ParamSpec]:
    """Re-root specs under ``prefix``."""
    return [ParamSpec(f"{prefix}.{s.name}" if prefix else s.name, s.shape, s.init) for s in specs]
