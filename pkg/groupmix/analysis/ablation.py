"""
Ablation variants of a preset.

Four families are expressible:

* aggregator toggles: each of Agg⁰ (non-attention) and Agg¹..Agg³ (the 3/5/7
  pre-attention branches) on or off; an off branch becomes an identity
  aggregator. All off degrades the block into plain self-attention. With
  Agg⁰ on, the pre-attention branches can also all share one kernel size
  (the ``3-3-3``, ``5-5-5`` and ``7-7-7`` plans).
* aggregator implementation: pre-attention branches as min/max/avg pooling
  or depthwise convolution.
* kernel plans: default (3, 5, 7), (5, 7, 9), large-to-small and
  small-to-large across the four stages.
* conv-first: every aggregator removed and a parallel identity/3/5/7 conv
  group placed in front of the attention module instead.
"""
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

from ..core.errors import ConfigurationError
from ..models.configs import AggregatorKind, AggregatorSpec, AttentionKind, ModelConfig
from ..models.gma import gma_param_count
from ..models.presets import get_preset

KERNEL_PLANS: Dict[str, Tuple[Tuple[int, int, int], ...]] = {
    "default": ((3, 5, 7),) * 4,
    "3-3-3": ((3, 3, 3),) * 4,
    "5-5-5": ((5, 5, 5),) * 4,
    "7-7-7": ((7, 7, 7),) * 4,
    "5-7-9": ((5, 7, 9),) * 4,
    "large-to-small": ((9, 9, 9), (7, 7, 7), (5, 5, 5), (3, 3, 3)),
    "small-to-large": ((3, 3, 3), (5, 5, 5), (7, 7, 7), (9, 9, 9)),
}

UNIFORM_PLANS = ("3-3-3", "5-5-5", "7-7-7")

ALL_ON = (True, True, True, True)
ALL_OFF = (False, False, False, False)


@dataclass(frozen=True)
class AblationVariant:
    """
    One structural variant of a preset.

    ``toggles`` is ordered (Agg⁰, Agg¹, Agg², Agg³).
    """
    base: str = "T"
    toggles: Tuple[bool, bool, bool, bool] = ALL_ON
    kind: Optional[AggregatorKind] = None
    kernel_plan: str = "default"
    attention: Optional[AttentionKind] = None
    conv_before_attention: bool = False
    name: Optional[str] = None

    def label(self) -> str:
        if self.name:
            return self.name
        marks = "".join("1" if on else "0" for on in self.toggles)
        parts = [self.base, f"agg{marks}"]
        if self.kind is not None:
            parts.append(AggregatorKind(self.kind).value)
        if self.kernel_plan != "default":
            parts.append(self.kernel_plan)
        if self.attention is not None:
            parts.append(AttentionKind(self.attention).value)
        if self.conv_before_attention:
            parts.append("conv-first")
        return "-".join(parts)


def make_ablation_variant(variant: AblationVariant) -> ModelConfig:
    """
    Build the ModelConfig of an ablation variant.

    Raises:
        ConfigurationError: For an unknown kernel plan or aggregator kind
    """
    if variant.kernel_plan not in KERNEL_PLANS:
        raise ConfigurationError(f"unknown kernel plan {variant.kernel_plan!r}; choose from {', '.join(KERNEL_PLANS)}")
    if len(variant.toggles) != 4:
        raise ConfigurationError(f"expected 4 aggregator toggles, got {len(variant.toggles)}")
    kind = AggregatorKind(variant.kind or AggregatorKind.DEPTHWISE_CONV)
    if kind == AggregatorKind.IDENTITY:
        raise ConfigurationError("use the toggles to disable aggregators")

    base = get_preset(variant.base)
    non_att_on, *pre_on = variant.toggles
    pre_plans, non_plans = [], []
    for kernels in KERNEL_PLANS[variant.kernel_plan]:
        branches = [AggregatorSpec.identity()]
        for on, k in zip(pre_on, kernels):
            branches.append(AggregatorSpec(kind, k) if on else AggregatorSpec.identity())
        pre_plans.append(tuple(branches))
        non_plans.append(AggregatorSpec.conv(3) if non_att_on else AggregatorSpec.identity())

    config = base.with_stage_plans(pre_plans, non_plans)
    changes = {"name": variant.label(), "conv_before_attention": variant.conv_before_attention}
    if variant.attention is not None:
        changes["attention"] = AttentionKind(variant.attention)
    return replace(config, **changes).validate()


def aggregator_table(base: str = "T") -> List[AblationVariant]:
    """
    Rows of the aggregator grid: all off, Agg⁰ off, Agg⁰ only, Agg⁰ with
    uniform 3/5/7 pre-attention kernels, all on.
    """
    rows = [
        AblationVariant(base=base, toggles=ALL_OFF),
        AblationVariant(base=base, toggles=(False, True, True, True)),
        AblationVariant(base=base, toggles=(True, False, False, False)),
    ]
    rows += [AblationVariant(base=base, kernel_plan=plan) for plan in UNIFORM_PLANS]
    rows.append(AblationVariant(base=base))
    return rows


def implementation_table(base: str = "T") -> List[AblationVariant]:
    kinds = (AggregatorKind.MIN_POOL, AggregatorKind.MAX_POOL, AggregatorKind.AVG_POOL, AggregatorKind.DEPTHWISE_CONV)
    return [AblationVariant(base=base, kind=kind) for kind in kinds]


def kernel_table(base: str = "T") -> List[AblationVariant]:
    return [AblationVariant(base=base, kernel_plan=plan) for plan in ("5-7-9", "large-to-small", "small-to-large", "default")]


def conv_first_variant(base: str = "T") -> AblationVariant:
    """All aggregators removed, conv group in front of the attention module."""
    return AblationVariant(base=base, toggles=ALL_OFF, conv_before_attention=True)


def ablation_grid(base: str = "T") -> List[AblationVariant]:
    """Every variant of the tables plus the quadratic-attention swap, without duplicates."""
    variants: List[AblationVariant] = []
    seen = set()
    extras = [AblationVariant(base=base, attention=AttentionKind.VANILLA), conv_first_variant(base)]
    for variant in aggregator_table(base) + implementation_table(base) + kernel_table(base) + extras:
        config = make_ablation_variant(variant)
        key = (config.stages, config.attention, config.conv_before_attention)
        if key in seen:
            continue
        seen.add(key)
        variants.append(variant)
    return variants


def aggregator_param_delta(config_on: ModelConfig, config_off: ModelConfig) -> int:
    """Analytic parameter difference carried by the aggregators of two variants."""
    total = 0
    for index, (on, off) in enumerate(zip(config_on.stages, config_off.stages)):
        total += on.depth * (gma_param_count(config_on.gma_config(index)) - gma_param_count(config_off.gma_config(index)))
    return total
