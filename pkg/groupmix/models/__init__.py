"""
GMA block, GroupMixFormer backbone, configurations and parameter storage.
"""
from .backbone import (
    GroupMixFormer,
    PyramidFeatures,
    build_model,
    drop_path,
    encoder_block_forward,
    ffn_forward,
    model_forward,
    model_layers,
    model_param_specs,
    patch_embed_2x,
    patch_embed_4x,
)
from .configs import (
    AggregatorKind,
    AggregatorSpec,
    AttentionKind,
    FfnActivation,
    GmaConfig,
    ModelConfig,
    PatchEmbedKind,
    StageConfig,
)
from .gma import (
    aggregate_non_attention,
    aggregate_pre_attention,
    factorized_attention,
    gma_forward,
    gma_param_count,
    split_segments,
    token_ensemble,
    vanilla_attention,
)
from .params import LayerInfo, ParamScope, ParamSpec, ParamStore, materialize
from .presets import get_preset, list_presets
