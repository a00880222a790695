"""
Group-Mix Attention block.

Q, K and V come from one linear projection and are laid out as a 3B-sample
spatial map, split channel-wise into five segments: an identity branch,
three aggregator branches (3×3, 5×5, 7×7 by default) and a non-attention
branch. The four pre-attention branches are concatenated and attended with
factorized (linear in N) attention; the non-attention branch skips attention.
A token ensemble (linear, LayerNorm, HardSwish) fuses both.

Parameter paths inside a block::

    qkv.weight (D, 3D), qkv.bias
    branch{b}.agg.weight (s, k, k), branch{b}.agg.bias      depthwise kinds
    branch{b}.pw.weight (s, s), branch{b}.pw.bias           depthwise kinds
    branch{b}.norm.weight, branch{b}.norm.bias
    non_attention.agg.weight (3s, k, k), non_attention.agg.bias
    non_attention.pw.weight (s, 3s), non_attention.pw.bias
    non_attention.norm.weight, non_attention.norm.bias
    ensemble.weight (D, D), ensemble.bias
    ensemble.norm.weight, ensemble.norm.bias

With ``conv_before_attention`` the block also owns ``conv_group.branch{b}.*``
(same layout as the pre-attention branches, acting on the input tokens).
"""
from typing import List

from ..core import ops
from ..core.errors import ConfigurationError, DimensionError
from ..core.tensor import Tensor
from .configs import (
    DEFAULT_PRE_ATTENTION,
    NUM_SEGMENTS,
    AggregatorKind,
    AggregatorSpec,
    AttentionKind,
    GmaConfig,
)
from .params import LayerInfo, ParamScope, bias, norm, weight

NON_ATTENTION = "non_attention"
CONV_GROUP = "conv_group"


def _channel_norm(x: Tensor, scope: ParamScope, bypass: bool = False) -> Tensor:
    if bypass:
        return x
    return ops.layer_norm(x, 1, scope["weight"], scope["bias"])


def _spatial(x: Tensor, spec: AggregatorSpec, scope: ParamScope) -> Tensor:
    """Apply the sliding-window part of an aggregator (no channel mapping)."""
    if spec.is_identity:
        return x
    if spec.kind == AggregatorKind.DEPTHWISE_CONV:
        return ops.conv2d_depthwise(x, scope["agg.weight"], scope["agg.bias"], spec.kernel)
    return ops.pool2d(x, spec.pool_kind, spec.kernel)


def split_segments(qkv: Tensor, dim: int) -> List[Tensor]:
    """
    Split a (3B, D, H, W) map into five channel segments of D/5.

    Order: identity branch, the three aggregator branches, non-attention branch.
    """
    if dim % NUM_SEGMENTS:
        raise ConfigurationError(f"cannot split {dim} channels into {NUM_SEGMENTS} equal segments")
    if qkv.ndim != 4 or qkv.shape[1] != dim:
        raise DimensionError(f"split_segments expects (3B, {dim}, H, W), got {qkv.shape}")
    return ops.split(qkv, [dim // NUM_SEGMENTS] * NUM_SEGMENTS, axis=1)


def aggregate_pre_attention(seg: Tensor, spec: AggregatorSpec, params: ParamScope, bypass_norm: bool = False) -> Tensor:
    """
    Turn one segment into group proxies: aggregator, channel LayerNorm, HardSwish.

    Depthwise aggregators are followed by a pointwise mapping; an identity
    spec applies only the norm and activation.
    """
    x = _spatial(seg, spec, params)
    if spec.followed_by_pointwise:
        x = ops.conv2d_pointwise(x, params["pw.weight"], params["pw.bias"])
    return ops.hardswish(_channel_norm(x, params.child("norm"), bypass_norm))


def aggregate_non_attention(
    seg4: Tensor,
    params: ParamScope,
    spec: AggregatorSpec = AggregatorSpec.conv(3),
    bypass_norm: bool = False,
) -> Tensor:
    """
    Non-attention branch: regroup the Q/K/V thirds of the last segment along
    channels, aggregate over all 3s channels, then map 3s→s.

    Args:
        seg4: Segment of shape (3B, s, H, W)
        params: Scope holding ``agg.*``, ``pw.*`` and ``norm.*``
        spec: Aggregator applied to the 3s-channel map

    Returns:
        Tensor of shape (B, s, H, W)
    """
    three_b, s, h, w = seg4.shape
    if three_b % 3:
        raise DimensionError(f"non-attention segment batch {three_b} is not a multiple of 3")
    b = three_b // 3
    x = ops.reshape(seg4, (3, b, s, h, w))
    x = ops.permute(x, (1, 0, 2, 3, 4))
    x = ops.reshape(x, (b, 3 * s, h, w))
    x = _spatial(x, spec, params)
    x = ops.conv2d_pointwise(x, params["pw.weight"], params["pw.bias"])
    return ops.hardswish(_channel_norm(x, params.child("norm"), bypass_norm))


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, op: str):
    if q.ndim != 4 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"{op}: q/k/v shapes {q.shape}, {k.shape}, {v.shape} must be equal (B, h, N, d)")


def factorized_attention(q: Tensor, k: Tensor, v: Tensor, scale: float, softmax_on_context: bool = False) -> Tensor:
    """
    Linear-cost attention through a d×d key-value context per head.

    Default: ``(q·scale) · (softmax_N(k)ᵀ · v)``. With ``softmax_on_context``
    the softmax is taken over the rows of ``kᵀ·v`` instead.
    """
    _check_qkv(q, k, v, "factorized_attention")
    k_t = ops.permute(k if softmax_on_context else ops.softmax(k, axis=2), (0, 1, 3, 2))
    context = ops.matmul(k_t, v)
    if softmax_on_context:
        context = ops.softmax(context, axis=-1)
    return ops.matmul(ops.scale(q, scale), context)


def vanilla_attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """Quadratic attention ``softmax(q·kᵀ·scale)·v``."""
    _check_qkv(q, k, v, "vanilla_attention")
    logits = ops.scale(ops.matmul(q, ops.permute(k, (0, 1, 3, 2))), scale)
    return ops.matmul(ops.softmax(logits, axis=-1), v)


def token_ensemble(x_att: Tensor, x_non_att: Tensor, params: ParamScope, bypass_norm: bool = False) -> Tensor:
    """
    Fuse attention and non-attention outputs into tokens.

    Channel concat, flatten to (B, N, D), linear D→D, LayerNorm, HardSwish.
    """
    if x_att.ndim != 4 or x_non_att.ndim != 4 or x_att.shape[0] != x_non_att.shape[0] or x_att.shape[2:] != x_non_att.shape[2:]:
        raise DimensionError(f"token_ensemble: incompatible maps {x_att.shape} and {x_non_att.shape}")
    dim = params["weight"].shape[0]
    if x_att.shape[1] + x_non_att.shape[1] != dim:
        raise DimensionError(
            f"token_ensemble: channels {x_att.shape[1]} + {x_non_att.shape[1]} do not sum to {dim}"
        )
    b, _, h, w = x_att.shape
    x = ops.concat([x_att, x_non_att], axis=1)
    x = ops.permute(ops.reshape(x, (b, dim, h * w)), (0, 2, 1))
    x = ops.linear(x, params["weight"], params["bias"])
    if not bypass_norm:
        x = ops.layer_norm(x, -1, params["norm.weight"], params["norm.bias"])
    return ops.hardswish(x)


def conv_group_forward(x: Tensor, height: int, width: int, params: ParamScope, bypass_norm: bool = False) -> Tensor:
    """
    Parallel identity/3×3/5×5/7×7 convolutions over the input tokens.

    The first four fifths of the channels go through the branches; the last
    fifth passes unchanged.

    Args:
        x: Tokens (B, N, D)
        height: Grid height
        width: Grid width
        params: Scope holding ``branch{b}.*``

    Returns:
        Tokens of the same shape as ``x``
    """
    b, n, dim = x.shape
    x_map = ops.reshape(ops.permute(x, (0, 2, 1)), (b, dim, height, width))
    segments = split_segments(x_map, dim)
    mixed = [
        aggregate_pre_attention(segments[i], spec, params.child(f"branch{i}"), bypass_norm)
        for i, spec in enumerate(DEFAULT_PRE_ATTENTION)
    ]
    out = ops.concat(mixed + [segments[4]], axis=1)
    return ops.permute(ops.reshape(out, (b, dim, n)), (0, 2, 1))


def gma_forward(x: Tensor, height: int, width: int, config: GmaConfig, params: ParamScope) -> Tensor:
    """
    Run one GMA block on a token sequence.

    Args:
        x: Tokens (B, N, D) with N = height·width
        height: Grid height
        width: Grid width
        config: Block configuration
        params: Scope holding the block's parameters

    Returns:
        Tokens of the same shape as ``x``

    Raises:
        DimensionError: If N != height·width or D disagrees with the config
    """
    if x.ndim != 3 or x.shape[1] != height * width:
        raise DimensionError(f"gma_forward: tokens {x.shape} do not form a {height}x{width} grid")
    if x.shape[2] != config.dim:
        raise DimensionError(f"gma_forward: token width {x.shape[2]} does not match dim {config.dim}")
    b, n, dim = x.shape
    s, heads, head_dim = config.segment, config.heads, config.head_dim
    bypass = config.bypass_norm

    if config.conv_before_attention:
        x = conv_group_forward(x, height, width, params.child(CONV_GROUP), bypass)
    qkv = ops.linear(x, params["qkv.weight"], params["qkv.bias"])
    qkv = ops.permute(ops.reshape(qkv, (b, n, 3, dim)), (2, 0, 3, 1))
    qkv = ops.reshape(qkv, (3 * b, dim, height, width))
    segments = split_segments(qkv, dim)

    branches = [
        aggregate_pre_attention(segments[i], spec, params.child(f"branch{i}"), bypass)
        for i, spec in enumerate(config.pre_attention)
    ]
    x_non_att = aggregate_non_attention(segments[4], params.child(NON_ATTENTION), config.non_attention, bypass)

    mixed = ops.concat(branches, axis=1)
    mixed = ops.reshape(mixed, (3, b, heads, head_dim, n))
    mixed = ops.permute(mixed, (0, 1, 2, 4, 3))
    q, k, v = (ops.reshape(ops.slice_axis(mixed, i, i + 1, 0), (b, heads, n, head_dim)) for i in range(3))

    if config.attention == AttentionKind.VANILLA:
        attended = vanilla_attention(q, k, v, config.scale)
    else:
        attended = factorized_attention(q, k, v, config.scale, config.softmax_on_context)
    x_att = ops.reshape(ops.permute(attended, (0, 1, 3, 2)), (b, 4 * s, height, width))
    return token_ensemble(x_att, x_non_att, params.child("ensemble"), bypass)


def attention_macs(tokens: int, dim: int, heads: int, kind: AttentionKind = AttentionKind.FACTORIZED) -> int:
    """Multiply-adds of one attention call for one sample; ``dim`` is the attended width."""
    head_dim = dim // heads
    if AttentionKind(kind) == AttentionKind.VANILLA:
        return 2 * heads * tokens * tokens * head_dim
    return 2 * heads * tokens * head_dim * head_dim


def _aggregator_layers(path: str, spec: AggregatorSpec, channels: int, out_channels: int, tokens: int,
                       pointwise: bool) -> List[LayerInfo]:
    layers = []
    if spec.kind == AggregatorKind.DEPTHWISE_CONV:
        k = spec.kernel
        layers.append(LayerInfo(
            f"{path}.agg",
            (weight(f"{path}.agg.weight", channels, k, k), bias(f"{path}.agg.bias", channels)),
            channels * k * k * tokens,
        ))
    if pointwise:
        layers.append(LayerInfo(
            f"{path}.pw",
            (weight(f"{path}.pw.weight", out_channels, channels), bias(f"{path}.pw.bias", out_channels)),
            channels * out_channels * tokens,
        ))
    layers.append(LayerInfo(f"{path}.norm", tuple(norm(f"{path}.norm", out_channels))))
    return layers


def gma_layers(config: GmaConfig, tokens: int = 0) -> List[LayerInfo]:
    """
    Costed modules of one block, in parameter order.

    Aggregators run on Q, K and V alike, so pre-attention branch MACs count
    three maps; the conv group runs once on the input.
    """
    dim, s = config.dim, config.segment
    layers = []
    if config.conv_before_attention:
        for index, spec in enumerate(DEFAULT_PRE_ATTENTION):
            layers.extend(_aggregator_layers(f"{CONV_GROUP}.branch{index}", spec, s, s, tokens,
                                             spec.followed_by_pointwise))
    layers += [LayerInfo("qkv", (weight("qkv.weight", dim, 3 * dim), bias("qkv.bias", 3 * dim)), dim * 3 * dim * tokens)]
    for index, spec in enumerate(config.pre_attention):
        for layer in _aggregator_layers(f"branch{index}", spec, s, s, tokens, spec.followed_by_pointwise):
            layers.append(LayerInfo(layer.path, layer.specs, 3 * layer.macs))
    layers.extend(_aggregator_layers(NON_ATTENTION, config.non_attention, 3 * s, s, tokens, True))
    layers.append(LayerInfo("attention", (), attention_macs(tokens, config.attention_dim, config.heads, config.attention)))
    layers.append(LayerInfo(
        "ensemble",
        (weight("ensemble.weight", dim, dim), bias("ensemble.bias", dim), *norm("ensemble.norm", dim)),
        dim * dim * tokens,
    ))
    return layers


def gma_param_specs(config: GmaConfig):
    return [spec for layer in gma_layers(config) for spec in layer.specs]


def gma_param_count(config: GmaConfig) -> int:
    """Number of learnable scalars in one block; a pure function of the config."""
    config.validate()
    return sum(layer.params for layer in gma_layers(config))
