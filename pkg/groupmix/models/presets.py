"""
Named GroupMixFormer configurations.

M/T/S/B/L reproduce the published architecture table (D, R, L per stage) with
their stochastic-depth rates; ``tiny`` and ``toy`` are desk-scale two-class
models used by the gradient suites and the synthetic training task.
"""
from typing import Dict, List, Tuple

from ..core.errors import ConfigurationError
from .configs import ModelConfig, StageConfig

# (dims, ratios, depths, drop_path_rate)
_TABLE: Dict[str, Tuple[Tuple[int, ...], Tuple[float, ...], Tuple[int, ...], float]] = {
    "M": ((40, 80, 160, 160), (4, 4, 4, 4), (3, 3, 12, 4), 0.0),
    "T": ((80, 160, 200, 240), (4, 4, 4, 4), (4, 4, 12, 4), 0.1),
    "S": ((80, 160, 320, 320), (4, 4, 4, 4), (2, 4, 12, 4), 0.2),
    "B": ((200, 240, 320, 480), (2, 2, 4, 4), (8, 8, 12, 8), 0.4),
    "L": ((240, 320, 360, 480), (4, 4, 2, 2), (8, 10, 30, 10), 0.5),
}

_TOY_SCALE = {
    "tiny": 10,
    "toy": 20,
}


def list_presets() -> List[str]:
    return list(_TABLE) + list(_TOY_SCALE)


def get_preset(name: str) -> ModelConfig:
    """
    Build the ModelConfig of a named preset.

    Args:
        name: One of M, T, S, B, L (case-insensitive), tiny or toy

    Raises:
        ConfigurationError: For an unknown name
    """
    key = name.upper() if name.upper() in _TABLE else name.lower()
    if key in _TABLE:
        dims, ratios, depths, rate = _TABLE[key]
        stages = [StageConfig(dim=d, ffn_ratio=r, depth=l) for d, r, l in zip(dims, ratios, depths)]
        return ModelConfig(stages=tuple(stages), num_classes=1000, drop_path_rate=rate, name=key)
    if key in _TOY_SCALE:
        dim = _TOY_SCALE[key]
        stages = [StageConfig(dim=dim, ffn_ratio=4, depth=1, heads=2) for _ in range(4)]
        return ModelConfig(stages=tuple(stages), num_classes=2, drop_path_rate=0.0, name=key)
    raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(list_presets())}")
