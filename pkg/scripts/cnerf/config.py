"""Configuration loading with layered precedence.

Priority: command-line flags > environment variables > JSON config file > defaults

Environment variables: CNERF_SEED, CNERF_THREADS, CNERF_OUTPUT_DIR.
Flags: --seed, --threads, --output-dir and repeated --set section.key=value.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

from dazzle_filekit import copy_file, normalize_cross_platform_path

from cnerf.config_merge import apply_override_config
from cnerf.debug import debug_log
from cnerf.errors import ConfigError, InputFormatError, MissingInputError
from cnerf.models import ExperimentConfig

CONFIG_FILENAME = "config.json"
ARCHIVED_SOURCE_FILENAME = "config.source.json"

ENV_OVERRIDES: dict[str, str] = {
    "CNERF_SEED": "seed",
    "CNERF_THREADS": "threads",
    "CNERF_OUTPUT_DIR": "output_dir",
}


# ============================================================================
# Paths
# ============================================================================


def resolve_path(path: Union[str, Path]) -> Path:
    """Normalize a user-supplied path for the current platform."""
    return Path(normalize_cross_platform_path(str(path)))


# ============================================================================
# Configuration Loading
# ============================================================================


def load_config_file(path: Union[str, Path]) -> dict[str, Any]:
    """Load a JSON config file; a missing or malformed file is a usage error."""
    path = resolve_path(path)
    if not path.exists():
        raise MissingInputError(path, "config file")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputFormatError(path, exc.lineno, exc.msg) from None
    if not isinstance(data, dict):
        raise InputFormatError(path, 1, "config root must be a JSON object")
    return data


def merge_configs(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Merge two config dicts, with override taking precedence."""
    result = base.copy()
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = merge_configs(result[key], value)
        else:
            result[key] = value
    return result


def _parse_flag_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_set_override(expression: str) -> dict[str, Any]:
    """'train.lambda_pixel=0.2' -> {'train': {'lambda_pixel': 0.2}}.

    Values are read as JSON when they parse, else kept as strings.
    """
    key, sep, raw = expression.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"--set expects section.key=value, got {expression!r}")
    parts = key.split(".")
    if any(not p for p in parts) or len(parts) > 2:
        raise ConfigError(f"--set key must be 'key' or 'section.key', got {key!r}", key=key)
    value = _parse_flag_value(raw.strip())
    return {parts[0]: value} if len(parts) == 1 else {parts[0]: {parts[1]: value}}


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    """Config dict built from the CNERF_* environment variables that are set."""
    environ = os.environ if environ is None else environ
    result: dict[str, Any] = {}
    for var, key in ENV_OVERRIDES.items():
        raw = environ.get(var)
        if raw:
            result[key] = raw if key == "output_dir" else _parse_flag_value(raw)
    return result


def load_configuration(
    config_path: Optional[Union[str, Path]] = None,
    flag_overrides: Optional[dict[str, Any]] = None,
    set_expressions: Sequence[str] = (),
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """Build the effective configuration.

    Priority: flags (including --set) > environment > config file > defaults
    """
    config = ExperimentConfig()
    if config_path is not None:
        apply_override_config(config, load_config_file(config_path))

    env = env_overrides(environ)
    if env:
        debug_log(f"config: environment overrides {sorted(env)}")
        apply_override_config(config, env)

    flags: dict[str, Any] = {}
    for expression in set_expressions:
        flags = merge_configs(flags, parse_set_override(expression))
    flags = merge_configs(flags, {k: v for k, v in (flag_overrides or {}).items() if v is not None})
    if flags:
        apply_override_config(config, flags)
    return config


# ============================================================================
# Serialization + documentation
# ============================================================================


def config_to_dict(config: ExperimentConfig) -> dict[str, Any]:
    return asdict(config)


def config_to_json(config: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n"


def describe_config() -> str:
    """Every config key with its default, one per line."""
    lines = ["configuration keys (defaults):"]

    def walk(obj: Any, prefix: str) -> None:
        for f in fields(obj):
            value = getattr(obj, f.name)
            if is_dataclass(value):
                walk(value, f"{prefix}{f.name}.")
            else:
                lines.append(f"  {prefix}{f.name} = {json.dumps(value)}")

    walk(ExperimentConfig(), "")
    lines.append("override with a JSON --config file, CNERF_SEED / CNERF_THREADS / CNERF_OUTPUT_DIR,")
    lines.append("or --set section.key=value (flags win)")
    return "\n".join(lines)


def write_effective_config(
    config: ExperimentConfig, output_dir: Union[str, Path], source_path: Optional[Union[str, Path]] = None
) -> Path:
    """Write config.json (sorted keys) into output_dir; archive the source file if given."""
    out = resolve_path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / CONFIG_FILENAME
    target.write_text(config_to_json(config), encoding="utf-8")
    if source_path is not None:
        src = resolve_path(source_path)
        archived = out / ARCHIVED_SOURCE_FILENAME
        if src.resolve() != archived.resolve():
            if not copy_file(src, archived, preserve_attrs=True, overwrite=True):
                debug_log(f"config: could not archive {src} to {archived}")
    return target
