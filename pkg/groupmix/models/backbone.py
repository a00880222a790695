"""
GroupMixFormer backbone: convolutional stem, four stages of encoder blocks,
classifier head and pyramid features.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple
import logging

import numpy as np

from ..core import ops
from ..core.errors import ConfigurationError, DimensionError
from ..core.rng import make_rng
from ..core.tensor import Tensor
from .configs import FfnActivation, ModelConfig, PatchEmbedKind
from .gma import gma_forward, gma_layers
from .params import LayerInfo, ParamScope, ParamSpec, ParamStore, bias, materialize, norm, weight

logger = logging.getLogger(__name__)

DOWNSAMPLE = 32
TRAIN = "train"
EVAL = "eval"


@dataclass
class PyramidFeatures:
    """Stage outputs as (B, D_i, H/2^(i+2), W/2^(i+2)) maps."""
    stage1: Tensor
    stage2: Tensor
    stage3: Tensor
    stage4: Tensor

    def as_list(self) -> List[Tensor]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]


def _conv_norm_act(x: Tensor, scope: ParamScope, stride: int) -> Tensor:
    x = ops.conv2d_strided(x, scope["conv.weight"], scope["conv.bias"], stride)
    x = ops.layer_norm(x, 1, scope["norm.weight"], scope["norm.bias"])
    return ops.hardswish(x)


def patch_embed_4x(img: Tensor, params: ParamScope) -> Tensor:
    """
    Overlapping 4× embedding: two stride-2 then two stride-1 3×3 convs,
    each followed by channel norm and HardSwish.

    Raises:
        ConfigurationError: If H or W is not divisible by 4
    """
    if img.ndim != 4:
        raise DimensionError(f"patch_embed_4x expects B×C×H×W, got {img.shape}")
    if img.shape[2] % 4 or img.shape[3] % 4:
        raise ConfigurationError(f"patch_embed_4x: {img.shape[2]}x{img.shape[3]} is not divisible by 4")
    x = img
    for index, stride in enumerate((2, 2, 1, 1)):
        x = _conv_norm_act(x, params.child(str(index)), stride)
    return x


def patch_embed_2x(x: Tensor, params: ParamScope, kind: PatchEmbedKind = PatchEmbedKind.SEPARABLE) -> Tensor:
    """
    2× downsampling between stages, followed by channel norm.

    ``separable`` runs a depthwise 3×3 stride-2 conv and a pointwise map;
    ``dense`` a single 3×3 stride-2 conv.

    Raises:
        ConfigurationError: If H or W is odd
    """
    if x.ndim != 4:
        raise DimensionError(f"patch_embed_2x expects B×C×H×W, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ConfigurationError(f"patch_embed_2x: {x.shape[2]}x{x.shape[3]} is not even")
    if PatchEmbedKind(kind) == PatchEmbedKind.DENSE:
        x = ops.conv2d_strided(x, params["conv.weight"], params["conv.bias"], stride=2)
    else:
        x = ops.conv2d_depthwise(x, params["dw.weight"], params["dw.bias"], 3, stride=2)
        x = ops.conv2d_pointwise(x, params["pw.weight"], params["pw.bias"])
    return ops.layer_norm(x, 1, params["norm.weight"], params["norm.bias"])


def ffn_forward(x: Tensor, params: ParamScope, activation: FfnActivation = FfnActivation.GELU) -> Tensor:
    """Per-token two-layer MLP; the hidden width is taken from ``fc1.weight``."""
    h = ops.linear(x, params["fc1.weight"], params["fc1.bias"])
    h = ops.hardswish(h) if FfnActivation(activation) == FfnActivation.HARDSWISH else ops.gelu(h)
    return ops.linear(h, params["fc2.weight"], params["fc2.bias"])


def drop_path(x: Tensor, residual: Tensor, rate: float, mode: str = EVAL,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Residual add with stochastic depth.

    In train mode each sample keeps its residual with probability 1 - rate,
    scaled by 1/(1 - rate); eval mode is a plain add.

    Raises:
        ConfigurationError: If rate is outside [0, 1)
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"drop_path rate must lie in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return ops.add(x, residual)
    if rng is None:
        raise ConfigurationError("drop_path in train mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(residual.shape[0]) < keep).astype(np.float64) / keep
    return ops.add(x, ops.scale_samples(residual, mask))


def encoder_block_forward(x: Tensor, height: int, width: int, params: ParamScope, gma_config,
                          drop_rate: float = 0.0, mode: str = EVAL,
                          rng: Optional[np.random.Generator] = None,
                          activation: FfnActivation = FfnActivation.GELU) -> Tensor:
    """Pre-norm residual block: x + GMA(LN(x)), then x + FFN(LN(x))."""
    if x.ndim != 3 or x.shape[1] != height * width:
        raise DimensionError(f"encoder block: tokens {x.shape} do not form a {height}x{width} grid")
    y = ops.layer_norm(x, -1, params["norm1.weight"], params["norm1.bias"])
    x = drop_path(x, gma_forward(y, height, width, gma_config, params.child("gma")), drop_rate, mode, rng)
    y = ops.layer_norm(x, -1, params["norm2.weight"], params["norm2.bias"])
    return drop_path(x, ffn_forward(y, params.child("ffn"), activation), drop_rate, mode, rng)


def _to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return ops.permute(ops.reshape(x, (b, c, h * w)), (0, 2, 1))


def _to_map(x: Tensor, height: int, width: int) -> Tensor:
    b, n, c = x.shape
    return ops.reshape(ops.permute(x, (0, 2, 1)), (b, c, height, width))


def _stem_layers(config: ModelConfig, height: int, width: int) -> List[LayerInfo]:
    d1 = config.stages[0].dim
    channels = [config.input_channels, d1 // 2, d1, d1, d1]
    sizes = [(height // 2) * (width // 2)] + [(height // 4) * (width // 4)] * 3
    layers = []
    for index in range(4):
        c_in, c_out = channels[index], channels[index + 1]
        path = f"stem.{index}"
        layers.append(LayerInfo(
            f"{path}.conv",
            (weight(f"{path}.conv.weight", c_out, c_in, 3, 3), bias(f"{path}.conv.bias", c_out)),
            c_out * c_in * 9 * sizes[index],
        ))
        layers.append(LayerInfo(f"{path}.norm", tuple(norm(f"{path}.norm", c_out))))
    return layers


def _embed_layers(config: ModelConfig, index: int, tokens: int) -> List[LayerInfo]:
    c_in, c_out = config.stages[index - 1].dim, config.stages[index].dim
    path = f"stages.{index}.embed"
    if config.patch_embed == PatchEmbedKind.DENSE:
        layers = [LayerInfo(
            f"{path}.conv",
            (weight(f"{path}.conv.weight", c_out, c_in, 3, 3), bias(f"{path}.conv.bias", c_out)),
            c_out * c_in * 9 * tokens,
        )]
    else:
        layers = [
            LayerInfo(f"{path}.dw", (weight(f"{path}.dw.weight", c_in, 3, 3), bias(f"{path}.dw.bias", c_in)),
                      c_in * 9 * tokens),
            LayerInfo(f"{path}.pw", (weight(f"{path}.pw.weight", c_out, c_in), bias(f"{path}.pw.bias", c_out)),
                      c_in * c_out * tokens),
        ]
    layers.append(LayerInfo(f"{path}.norm", tuple(norm(f"{path}.norm", c_out))))
    return layers


def _block_layers(config: ModelConfig, index: int, block: int, tokens: int) -> List[LayerInfo]:
    stage = config.stages[index]
    dim, hidden = stage.dim, stage.hidden_dim
    path = f"stages.{index}.blocks.{block}"
    layers = [LayerInfo(f"{path}.norm1", tuple(norm(f"{path}.norm1", dim)))]
    layers.extend(layer.rooted(f"{path}.gma") for layer in gma_layers(config.gma_config(index), tokens))
    layers.append(LayerInfo(f"{path}.norm2", tuple(norm(f"{path}.norm2", dim))))
    layers.append(LayerInfo(
        f"{path}.ffn.fc1",
        (weight(f"{path}.ffn.fc1.weight", dim, hidden), bias(f"{path}.ffn.fc1.bias", hidden)),
        dim * hidden * tokens,
    ))
    layers.append(LayerInfo(
        f"{path}.ffn.fc2",
        (weight(f"{path}.ffn.fc2.weight", hidden, dim), bias(f"{path}.ffn.fc2.bias", dim)),
        hidden * dim * tokens,
    ))
    return layers


def model_layers(config: ModelConfig, height: int = 0, width: int = 0) -> List[LayerInfo]:
    """
    Every costed module of the backbone in parameter order.

    With a zero resolution the MAC counts are zero and only the parameter
    layout is meaningful.
    """
    layers = _stem_layers(config, height, width)
    for index, stage in enumerate(config.stages):
        tokens = (height >> (index + 2)) * (width >> (index + 2))
        if index:
            layers.extend(_embed_layers(config, index, tokens))
        for block in range(stage.depth):
            layers.extend(_block_layers(config, index, block, tokens))
    d4 = config.stages[-1].dim
    layers.append(LayerInfo("head.norm", tuple(norm("head.norm", d4))))
    layers.append(LayerInfo(
        "head.fc",
        (weight("head.fc.weight", d4, config.num_classes), bias("head.fc.bias", config.num_classes)),
        d4 * config.num_classes,
    ))
    return layers


def model_param_specs(config: ModelConfig) -> List[ParamSpec]:
    return [spec for layer in model_layers(config) for spec in layer.specs]


def check_resolution(height: int, width: int):
    if height <= 0 or width <= 0 or height % DOWNSAMPLE or width % DOWNSAMPLE:
        raise ConfigurationError(f"input {height}x{width} is not a positive multiple of {DOWNSAMPLE}")


class GroupMixFormer:
    """
    Four-stage GroupMixFormer bound to a ParamStore.

    The model holds no tensors of its own; every forward reads the store, so
    optimizer updates and weight loads take effect immediately.
    """

    def __init__(self, config: ModelConfig, store: ParamStore, seed: int = 0):
        self.config = config
        self.store = store
        self.seed = seed
        self.drop_rates = config.block_drop_rates()
        self.gma_configs = [config.gma_config(i) for i in range(len(config.stages))]
        self._train_calls = 0

    def num_params(self) -> int:
        return self.store.num_params()

    def forward(self, img: Tensor, mode: str = EVAL,
                rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, PyramidFeatures]:
        """
        Classify a batch of images and return the pyramid features.

        Args:
            img: Images (B, C, H, W), H and W multiples of 32
            mode: ``eval`` or ``train`` (stochastic depth active)
            rng: Drop-path generator; without one, each train-mode call draws
                from its own ``dropout`` stream keyed by the model seed and a call counter

        Returns:
            (logits (B, classes), PyramidFeatures)
        """
        if mode not in (TRAIN, EVAL):
            raise ConfigurationError(f"unknown mode {mode!r}")
        if img.ndim != 4 or img.shape[1] != self.config.input_channels:
            raise DimensionError(f"expected (B, {self.config.input_channels}, H, W) images, got {img.shape}")
        check_resolution(img.shape[2], img.shape[3])
        if mode == TRAIN and rng is None:
            self._train_calls += 1
            rng = make_rng(self.seed, "dropout", 0, self._train_calls)

        root = self.store.scope("")
        x = patch_embed_4x(img, root.child("stem"))
        features = []
        for index, stage in enumerate(self.config.stages):
            scope = root.child(f"stages.{index}")
            if index:
                x = patch_embed_2x(x, scope.child("embed"), self.config.patch_embed)
            _, _, h, w = x.shape
            tokens = _to_tokens(x)
            for block in range(stage.depth):
                tokens = encoder_block_forward(
                    tokens, h, w, scope.child(f"blocks.{block}"), self.gma_configs[index],
                    self.drop_rates[index][block], mode, rng, self.config.ffn_activation,
                )
            x = _to_map(tokens, h, w)
            features.append(x)

        pooled = ops.global_avg_pool(ops.layer_norm(x, 1, root["head.norm.weight"], root["head.norm.bias"]))
        logits = ops.linear(pooled, root["head.fc.weight"], root["head.fc.bias"])
        return logits, PyramidFeatures(*features)

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0) -> Tuple[ParamStore, GroupMixFormer]:
    """
    Validate ``config`` and materialize a freshly initialized model.

    Raises:
        ConfigurationError: Naming the offending stage
    """
    config.validate()
    store = materialize(model_param_specs(config), seed)
    logger.info(f"Built {config.name} model: {store.num_params()} parameters in {len(store)} tensors")
    return store, GroupMixFormer(config, store, seed)


def model_forward(model: GroupMixFormer, img: Tensor, mode: str = EVAL,
                  rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, PyramidFeatures]:
    return model.forward(img, mode, rng)
