"""
Strict JSON configuration files for GroupMixFormer models.
"""
from pathlib import Path
from typing import List, Literal, Optional, Union
import json
import logging

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..core.errors import ConfigurationError
from ..models.configs import (
    AggregatorKind,
    AggregatorSpec,
    AttentionKind,
    FfnActivation,
    ModelConfig,
    PatchEmbedKind,
    StageConfig,
)
from ..models.presets import get_preset, list_presets

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class StrictModel(BaseModel):
    """Base schema: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


class AggregatorEntry(StrictModel):
    """One branch aggregator; ``kernel`` may be omitted for identity."""
    kind: AggregatorKind
    kernel: Optional[int] = Field(None, ge=1, le=9)

    @model_validator(mode="after")
    def check_kernel(self):
        if self.kernel is None:
            if self.kind != AggregatorKind.IDENTITY:
                raise ValueError(f"{self.kind.value} aggregator needs a kernel size")
            self.kernel = 1
        self.to_spec().validate(self.kind.value)
        return self

    def to_spec(self) -> AggregatorSpec:
        return AggregatorSpec(self.kind, self.kernel if self.kernel is not None else 1)

    @classmethod
    def from_spec(cls, spec: AggregatorSpec) -> "AggregatorEntry":
        return cls(kind=spec.kind, kernel=spec.kernel)


class AggregatorPlan(StrictModel):
    """Aggregators of the four pre-attention branches and the non-attention branch."""
    pre_attention: List[AggregatorEntry] = Field(..., min_length=4, max_length=4)
    non_attention: AggregatorEntry

    def pre_specs(self):
        return tuple(entry.to_spec() for entry in self.pre_attention)


class StageEntry(StrictModel):
    """Explicit stage: width D, FFN ratio R, depth L and heads."""
    dim: int = Field(..., gt=0)
    ratio: float = Field(..., gt=0)
    depth: int = Field(..., gt=0)
    heads: int = Field(8, gt=0)
    aggregators: Optional[AggregatorPlan] = None


class ConfigFile(StrictModel):
    """
    Model configuration file.

    Either ``preset`` or ``stages`` names the architecture. ``aggregators``
    applies to every stage unless a stage carries its own plan.
    """
    schema_version: Literal[1]
    name: Optional[str] = None
    preset: Optional[str] = None
    stages: Optional[List[StageEntry]] = Field(None, min_length=4, max_length=4)
    aggregators: Optional[AggregatorPlan] = None
    attention: AttentionKind = AttentionKind.FACTORIZED
    softmax_on_context: bool = False
    patch_embed: PatchEmbedKind = PatchEmbedKind.SEPARABLE
    ffn_activation: FfnActivation = FfnActivation.GELU
    conv_before_attention: bool = False
    num_classes: Optional[int] = Field(None, gt=0)
    drop_path_rate: Optional[float] = Field(None, ge=0.0, lt=1.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def check_architecture(self):
        if (self.preset is None) == (self.stages is None):
            raise ValueError("exactly one of 'preset' and 'stages' must be given")
        if self.preset is not None and self.preset.upper() not in list_presets() and self.preset.lower() not in list_presets():
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(list_presets())}")
        return self

    def to_model_config(self) -> ModelConfig:
        """
        Resolve the file into a validated ModelConfig.

        Raises:
            ConfigurationError: If the resolved architecture violates a constraint
        """
        if self.preset is not None:
            base = get_preset(self.preset)
            stages = list(base.stages)
            num_classes, drop_path_rate, name = base.num_classes, base.drop_path_rate, base.name
        else:
            stages = [StageConfig(dim=s.dim, ffn_ratio=s.ratio, depth=s.depth, heads=s.heads) for s in self.stages]
            num_classes, drop_path_rate, name = 1000, 0.0, "custom"

        if self.aggregators is not None:
            stages = [
                StageConfig(s.dim, s.ffn_ratio, s.depth, s.heads,
                            self.aggregators.pre_specs(), self.aggregators.non_attention.to_spec())
                for s in stages
            ]
        if self.stages is not None:
            for index, entry in enumerate(self.stages):
                if entry.aggregators is not None:
                    s = stages[index]
                    stages[index] = StageConfig(s.dim, s.ffn_ratio, s.depth, s.heads,
                                                entry.aggregators.pre_specs(),
                                                entry.aggregators.non_attention.to_spec())

        config = ModelConfig(
            stages=tuple(stages),
            num_classes=self.num_classes if self.num_classes is not None else num_classes,
            drop_path_rate=self.drop_path_rate if self.drop_path_rate is not None else drop_path_rate,
            attention=self.attention,
            softmax_on_context=self.softmax_on_context,
            patch_embed=self.patch_embed,
            ffn_activation=self.ffn_activation,
            conv_before_attention=self.conv_before_attention,
            name=self.name or name,
        )
        return config.validate()

    @classmethod
    def from_model_config(cls, config: ModelConfig, seed: int = 0) -> "ConfigFile":
        """Describe ``config`` with explicit stages and per-stage aggregator plans."""
        stages = [
            StageEntry(
                dim=s.dim, ratio=s.ffn_ratio, depth=s.depth, heads=s.heads,
                aggregators=AggregatorPlan(
                    pre_attention=[AggregatorEntry.from_spec(a) for a in s.pre_attention],
                    non_attention=AggregatorEntry.from_spec(s.non_attention),
                ),
            )
            for s in config.stages
        ]
        return cls(
            schema_version=SCHEMA_VERSION,
            name=config.name,
            stages=stages,
            attention=config.attention,
            softmax_on_context=config.softmax_on_context,
            patch_embed=config.patch_embed,
            ffn_activation=config.ffn_activation,
            conv_before_attention=config.conv_before_attention,
            num_classes=config.num_classes,
            drop_path_rate=config.drop_path_rate,
            seed=seed,
        )

    def to_json(self) -> str:
        return self.model_dump_json(indent=2, exclude_none=True)


def _format_validation_error(exc: ValidationError, source: str) -> str:
    lines = [f"{source}: {exc.error_count()} schema error(s)"]
    for error in exc.errors():
        field = ".".join(str(part) for part in error["loc"]) or "<root>"
        lines.append(f"  {field}: {error['msg']}")
    return "\n".join(lines)


def parse_config_text(text: str, source: str = "<config>") -> ConfigFile:
    """
    Parse and validate configuration text.

    Raises:
        ConfigurationError: With line/column for JSON syntax errors and the
            field path for schema errors
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from exc
    try:
        return ConfigFile.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(_format_validation_error(exc, source)) from exc


def load_config_file(path: Union[str, Path]) -> ConfigFile:
    """
    Read a JSON configuration file.

    Raises:
        ConfigurationError: On malformed content
        OSError: If the file cannot be read
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigurationError(f"{path}: not UTF-8 text") from exc
    config = parse_config_text(text, str(path))
    logger.debug(f"Loaded configuration {path}")
    return config


def config_json_schema() -> dict:
    return ConfigFile.model_json_schema()
