"""
Pydantic schemas for configuration files.
"""
from .config_file import (
    SCHEMA_VERSION,
    AggregatorEntry,
    AggregatorPlan,
    ConfigFile,
    StageEntry,
    config_json_schema,
    load_config_file,
    parse_config_text,
)

__all__ = [
    "SCHEMA_VERSION",
    "AggregatorEntry",
    "AggregatorPlan",
    "ConfigFile",
    "StageEntry",
    "config_json_schema",
    "load_config_file",
    "parse_config_text",
]
