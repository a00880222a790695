"""
Configuration records for the GMA block and the GroupMixFormer backbone.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple
import math

import numpy as np

from ..core.errors import ConfigurationError

ALLOWED_KERNELS = (1, 3, 5, 7, 9)
NUM_SEGMENTS = 5
NUM_STAGES = 4


class AggregatorKind(str, Enum):
    """Sliding-window operator used to turn tokens into group proxies."""
    DEPTHWISE_CONV = "depthwise-conv"
    MIN_POOL = "min-pool"
    MAX_POOL = "max-pool"
    AVG_POOL = "avg-pool"
    IDENTITY = "identity"


class AttentionKind(str, Enum):
    FACTORIZED = "factorized"
    VANILLA = "vanilla"


class PatchEmbedKind(str, Enum):
    SEPARABLE = "separable"
    DENSE = "dense"


class FfnActivation(str, Enum):
    GELU = "gelu"
    HARDSWISH = "hardswish"


@dataclass(frozen=True)
class AggregatorSpec:
    """One branch aggregator: its kind and (odd) kernel size."""
    kind: AggregatorKind
    kernel: int

    def __post_init__(self):
        object.__setattr__(self, "kind", AggregatorKind(self.kind))

    @classmethod
    def identity(cls) -> "AggregatorSpec":
        return cls(AggregatorKind.IDENTITY, 1)

    @classmethod
    def conv(cls, kernel: int) -> "AggregatorSpec":
        return cls(AggregatorKind.DEPTHWISE_CONV, kernel)

    @property
    def is_identity(self) -> bool:
        return self.kind == AggregatorKind.IDENTITY

    @property
    def followed_by_pointwise(self) -> bool:
        """Depthwise convolutions are followed by a linear channel mapping."""
        return self.kind == AggregatorKind.DEPTHWISE_CONV

    @property
    def pool_kind(self) -> Optional[str]:
        return {
            AggregatorKind.MIN_POOL: "min",
            AggregatorKind.MAX_POOL: "max",
            AggregatorKind.AVG_POOL: "avg",
        }.get(self.kind)

    def validate(self, where: str = "aggregator"):
        if self.kernel not in ALLOWED_KERNELS:
            raise ConfigurationError(f"{where}: kernel {self.kernel} not in {ALLOWED_KERNELS}")
        if self.is_identity != (self.kernel == 1):
            raise ConfigurationError(f"{where}: kernel 1 is reserved for identity aggregators ({self.kind.value}, k={self.kernel})")

    def label(self) -> str:
        return "identity" if self.is_identity else f"{self.kind.value}:{self.kernel}"


DEFAULT_PRE_ATTENTION: Tuple[AggregatorSpec, ...] = (
    AggregatorSpec.identity(),
    AggregatorSpec.conv(3),
    AggregatorSpec.conv(5),
    AggregatorSpec.conv(7),
)
DEFAULT_NON_ATTENTION = AggregatorSpec.conv(3)


@dataclass(frozen=True)
class GmaConfig:
    """
    Hyper-parameters of one GMA block.

    ``conv_before_attention`` runs a parallel identity/3×3/5×5/7×7 conv group
    over the block input ahead of the Q/K/V projection.

    ``bypass_norm`` skips every LayerNorm in the block (activations remain);
    it exists for identity-composition tests only.
    """
    dim: int
    heads: int = 8
    pre_attention: Tuple[AggregatorSpec, ...] = DEFAULT_PRE_ATTENTION
    non_attention: AggregatorSpec = DEFAULT_NON_ATTENTION
    attention: AttentionKind = AttentionKind.FACTORIZED
    softmax_on_context: bool = False
    conv_before_attention: bool = False
    bypass_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pre_attention", tuple(self.pre_attention))
        object.__setattr__(self, "attention", AttentionKind(self.attention))

    @property
    def segment(self) -> int:
        return self.dim // NUM_SEGMENTS

    @property
    def attention_dim(self) -> int:
        return 4 * self.segment

    @property
    def head_dim(self) -> int:
        return self.attention_dim // self.heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)

    def validate(self, where: str = "gma"):
        if self.dim <= 0 or self.dim % NUM_SEGMENTS:
            raise ConfigurationError(f"{where}: dim {self.dim} is not a positive multiple of {NUM_SEGMENTS}")
        if self.heads <= 0 or self.attention_dim % self.heads:
            raise ConfigurationError(
                f"{where}: attention width {self.attention_dim} (4*{self.dim}/5) is not divisible by {self.heads} heads"
            )
        if len(self.pre_attention) != 4:
            raise ConfigurationError(f"{where}: expected 4 pre-attention aggregators, got {len(self.pre_attention)}")
        for index, spec in enumerate(self.pre_attention):
            spec.validate(f"{where}.branch{index}")
        self.non_attention.validate(f"{where}.non_attention")


@dataclass(frozen=True)
class StageConfig:
    """One pyramid stage: width D, FFN ratio R, depth L, heads and branch plan."""
    dim: int
    ffn_ratio: float
    depth: int
    heads: int = 8
    pre_attention: Tuple[AggregatorSpec, ...] = DEFAULT_PRE_ATTENTION
    non_attention: AggregatorSpec = DEFAULT_NON_ATTENTION

    def __post_init__(self):
        object.__setattr__(self, "pre_attention", tuple(self.pre_attention))

    @property
    def hidden_dim(self) -> int:
        return int(round(self.ffn_ratio * self.dim))


@dataclass(frozen=True)
class ModelConfig:
    """Full backbone configuration; ``stages`` holds exactly four entries."""
    stages: Tuple[StageConfig, ...]
    num_classes: int = 1000
    drop_path_rate: float = 0.0
    input_channels: int = 3
    attention: AttentionKind = AttentionKind.FACTORIZED
    softmax_on_context: bool = False
    patch_embed: PatchEmbedKind = PatchEmbedKind.SEPARABLE
    ffn_activation: FfnActivation = FfnActivation.GELU
    conv_before_attention: bool = False
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        object.__setattr__(self, "patch_embed", PatchEmbedKind(self.patch_embed))
        object.__setattr__(self, "ffn_activation", FfnActivation(self.ffn_activation))

    @property
    def total_blocks(self) -> int:
        return sum(stage.depth for stage in self.stages)

    def gma_config(self, stage_index: int) -> GmaConfig:
        stage = self.stages[stage_index]
        return GmaConfig(
            dim=stage.dim,
            heads=stage.heads,
            pre_attention=stage.pre_attention,
            non_attention=stage.non_attention,
            attention=self.attention,
            softmax_on_context=self.softmax_on_context,
            conv_before_attention=self.conv_before_attention,
        )

    def block_drop_rates(self) -> List[List[float]]:
        """Per-stage lists of drop-path rates, ramping linearly from 0 to the model rate."""
        rates = np.linspace(0.0, self.drop_path_rate, self.total_blocks).tolist()
        out, start = [], 0
        for stage in self.stages:
            out.append(rates[start:start + stage.depth])
            start += stage.depth
        return out

    def validate(self) -> "ModelConfig":
        """
        Check every divisibility and range constraint.

        Returns:
            self, for chaining

        Raises:
            ConfigurationError: naming the offending stage
        """
        if len(self.stages) != NUM_STAGES:
            raise ConfigurationError(f"expected {NUM_STAGES} stages, got {len(self.stages)}")
        if self.num_classes <= 0:
            raise ConfigurationError(f"num_classes must be positive, got {self.num_classes}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigurationError(f"drop_path_rate must lie in [0, 1), got {self.drop_path_rate}")
        if self.input_channels <= 0:
            raise ConfigurationError(f"input_channels must be positive, got {self.input_channels}")
        for index, stage in enumerate(self.stages):
            where = f"stage {index + 1}"
            if stage.depth <= 0:
                raise ConfigurationError(f"{where}: depth must be positive, got {stage.depth}")
            if stage.ffn_ratio <= 0 or stage.hidden_dim <= 0:
                raise ConfigurationError(f"{where}: ffn ratio {stage.ffn_ratio} gives no hidden units")
            self.gma_config(index).validate(where)
        return self

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def with_stage_plans(
        self,
        pre_attention: Optional[Sequence[Sequence[AggregatorSpec]]] = None,
        non_attention: Optional[Sequence[AggregatorSpec]] = None,
    ) -> "ModelConfig":
        """Return a copy with per-stage aggregator plans replaced."""
        stages = []
        for index, stage in enumerate(self.stages):
            changes = {}
            if pre_attention is not None:
                changes["pre_attention"] = tuple(pre_attention[index])
            if non_attention is not None:
                changes["non_attention"] = non_attention[index]
            stages.append(replace(stage, **changes))
        return replace(self, stages=tuple(stages))
