"""
Tests for JSON configuration files and process settings.
"""
import json
from pathlib import Path

import pytest

from groupmix.config import Settings
from groupmix.core.errors import ConfigurationError
from groupmix.models.configs import AggregatorKind, AttentionKind
from groupmix.models.presets import get_preset
from groupmix.schemas import ConfigFile, config_json_schema, load_config_file, parse_config_text

EXAMPLE = Path(__file__).resolve().parent.parent / "config.example.json"

TOY_STAGE = {"dim": 20, "ratio": 4, "depth": 1, "heads": 2}


def _text(**fields) -> str:
    data = {"schema_version": 1}
    data.update(fields)
    return json.dumps(data)


class TestParsing:
    def test_preset_file(self):
        config = parse_config_text(_text(preset="T")).to_model_config()
        assert [s.dim for s in config.stages] == [80, 160, 200, 240]
        assert config.num_classes == 1000

    def test_preset_overrides(self):
        config = parse_config_text(_text(preset="m", num_classes=10, drop_path_rate=0.2)).to_model_config()
        assert config.num_classes == 10
        assert config.drop_path_rate == 0.2

    def test_explicit_stages(self):
        config = parse_config_text(_text(stages=[TOY_STAGE] * 4, num_classes=2)).to_model_config()
        assert [s.dim for s in config.stages] == [20] * 4
        assert config.stages[0].heads == 2

    def test_identity_kernel_may_be_omitted(self):
        plan = {
            "pre_attention": [{"kind": "identity"}] * 4,
            "non_attention": {"kind": "identity"},
        }
        config = parse_config_text(_text(preset="tiny", aggregators=plan)).to_model_config()
        assert all(spec.is_identity for spec in config.stages[0].pre_attention)

    def test_stage_plan_overrides_global_plan(self):
        config = load_config_file(EXAMPLE).to_model_config()
        assert config.name == "toy-pools"
        assert config.stages[0].pre_attention[1].kind == AggregatorKind.DEPTHWISE_CONV
        assert [spec.kind for spec in config.stages[2].pre_attention[1:]] == [
            AggregatorKind.MAX_POOL, AggregatorKind.AVG_POOL, AggregatorKind.MIN_POOL,
        ]

    def test_model_config_round_trip(self):
        original = get_preset("S").replace(attention=AttentionKind.VANILLA, softmax_on_context=True)
        config_file = ConfigFile.from_model_config(original, seed=7)
        restored = parse_config_text(config_file.to_json())
        assert restored.seed == 7
        assert restored.to_model_config() == original

    def test_conv_before_attention_round_trip(self):
        original = get_preset("tiny").replace(conv_before_attention=True)
        restored = parse_config_text(ConfigFile.from_model_config(original).to_json()).to_model_config()
        assert restored.conv_before_attention
        assert restored == original
        assert not parse_config_text(_text(preset="T")).to_model_config().conv_before_attention


class TestRejection:
    def test_invalid_json_reports_position(self):
        with pytest.raises(ConfigurationError, match=r"cfg.json:2:\d+: invalid JSON"):
            parse_config_text('{"schema_version": 1,\n  "preset": }', "cfg.json")

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="presett"):
            parse_config_text(_text(presett="T"))

    def test_unknown_stage_key_names_field_path(self):
        stage = dict(TOY_STAGE, width=3)
        with pytest.raises(ConfigurationError, match=r"stages\.1\.width"):
            parse_config_text(_text(stages=[TOY_STAGE, stage, TOY_STAGE, TOY_STAGE]))

    def test_preset_and_stages_are_exclusive(self):
        with pytest.raises(ConfigurationError, match="exactly one"):
            parse_config_text(_text(preset="T", stages=[TOY_STAGE] * 4))

    def test_needs_architecture(self):
        with pytest.raises(ConfigurationError):
            parse_config_text(_text())

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError, match="unknown preset"):
            parse_config_text(_text(preset="XL"))

    def test_wrong_schema_version(self):
        with pytest.raises(ConfigurationError, match="schema_version"):
            parse_config_text(json.dumps({"schema_version": 2, "preset": "T"}))

    def test_three_stages(self):
        with pytest.raises(ConfigurationError, match="stages"):
            parse_config_text(_text(stages=[TOY_STAGE] * 3))

    def test_even_kernel(self):
        plan = {
            "pre_attention": [{"kind": "identity"}, {"kind": "depthwise-conv", "kernel": 4},
                              {"kind": "depthwise-conv", "kernel": 5}, {"kind": "depthwise-conv", "kernel": 7}],
            "non_attention": {"kind": "depthwise-conv", "kernel": 3},
        }
        with pytest.raises(ConfigurationError, match="kernel 4"):
            parse_config_text(_text(preset="T", aggregators=plan))

    def test_conv_needs_kernel(self):
        plan = {
            "pre_attention": [{"kind": "identity"}, {"kind": "max-pool"},
                              {"kind": "max-pool", "kernel": 5}, {"kind": "max-pool", "kernel": 7}],
            "non_attention": {"kind": "identity"},
        }
        with pytest.raises(ConfigurationError, match="needs a kernel"):
            parse_config_text(_text(preset="T", aggregators=plan))

    def test_indivisible_stage_names_stage(self):
        stages = [TOY_STAGE, TOY_STAGE, dict(TOY_STAGE, dim=22), TOY_STAGE]
        config_file = parse_config_text(_text(stages=stages))
        with pytest.raises(ConfigurationError, match="stage 3"):
            config_file.to_model_config()

    def test_drop_path_rate_range(self):
        with pytest.raises(ConfigurationError, match="drop_path_rate"):
            parse_config_text(_text(preset="T", drop_path_rate=1.0))

    def test_non_utf8_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_bytes(b'{"schema_version": 1, "name": "\xff"}')
        with pytest.raises(ConfigurationError, match="UTF-8"):
            load_config_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_config_file(tmp_path / "absent.json")


class TestSchema:
    def test_schema_lists_fields(self):
        schema = config_json_schema()
        assert {"schema_version", "preset", "stages", "aggregators", "seed"} <= set(schema["properties"])
        assert schema["additionalProperties"] is False


class TestSettings:
    def test_defaults(self):
        settings = Settings(_env_file=None)
        assert settings.SEED is None
        assert settings.BENCH_REPS == 5

    def test_environment_prefix(self, monkeypatch):
        monkeypatch.setenv("GMX_SEED", "17")
        monkeypatch.setenv("GMX_GRADCHECK_RTOL", "0.01")
        settings = Settings(_env_file=None)
        assert settings.SEED == 17
        assert settings.GRADCHECK_RTOL == 0.01
