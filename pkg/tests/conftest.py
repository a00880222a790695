"""
Shared fixtures for the GroupMix test suite.
"""
import numpy as np
import pytest

from groupmix.core.rng import make_rng
from groupmix.core.tensor import Tensor
from groupmix.models.configs import GmaConfig
from groupmix.models.gma import gma_param_specs
from groupmix.models.params import materialize
from groupmix.models.presets import get_preset


@pytest.fixture
def rng():
    return make_rng(1234, "check")


@pytest.fixture
def tensor_factory(rng):
    def make(*shape, requires_grad=False, spread=1.0):
        return Tensor(rng.uniform(-spread, spread, size=shape), requires_grad=requires_grad)
    return make


@pytest.fixture
def tiny_config():
    return get_preset("tiny")


@pytest.fixture
def toy_config():
    return get_preset("toy")


@pytest.fixture
def gma_block():
    """A D=10, two-head block with randomized (non-default) parameters."""
    config = GmaConfig(dim=10, heads=2)
    store = materialize(gma_param_specs(config), seed=3)
    jitter = make_rng(3, "check", 1)
    for _, tensor in store.items():
        tensor.data += jitter.normal(0.0, 0.3, size=tensor.shape)
    return config, store


@pytest.fixture(autouse=True)
def _clear_seed_env(monkeypatch):
    monkeypatch.delenv("GMX_SEED", raising=False)
    monkeypatch.delenv("GMX_LOG_FILE", raising=False)
