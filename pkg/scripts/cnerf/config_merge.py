"""Per-key merge protocol for the typed config dataclasses.

Each section dataclass in `cnerf/models.py` has an apply_override_*
function that walks the keys present in a partial override dict and
coerces each value onto the target in place. Keys absent from the
override keep their current value. Unknown keys raise ConfigError naming
the dotted key, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import math
from typing import Any, Callable, Optional

from cnerf.errors import ConfigError
from cnerf.models import (
    ACTIVATIONS,
    SCENE_NAMES,
    AblationConfig,
    EvalConfig,
    ExperimentConfig,
    FieldConfig,
    PreprocessConfig,
    SynthConfig,
    TrainConfig,
)

Coercer = Callable[[Any], Any]


# ============================================================================
# Coercion helpers
# ============================================================================


def parse_bool(value: Any) -> bool:
    """Coerce a JSON or flag value (bool/str/int) to bool."""
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(value, int):
        return value != 0
    raise ValueError(f"not a boolean: {value!r}")


def _as_int(value: Any) -> int:
    if isinstance(value, bool):
        raise ValueError("booleans are not integers")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"not an integer: {value!r}")
        return int(value)
    return int(value)


def _as_float(value: Any) -> float:
    if isinstance(value, bool):
        raise ValueError("booleans are not numbers")
    result = float(value)
    if not math.isfinite(result):
        raise ValueError(f"must be finite, got {value!r}")
    return result


def _at_least(minimum: float, base: Coercer) -> Coercer:
    def coerce(value: Any):
        result = base(value)
        if result < minimum:
            raise ValueError(f"must be >= {minimum}, got {result!r}")
        return result
    return coerce


def _positive(base: Coercer) -> Coercer:
    def coerce(value: Any):
        result = base(value)
        if not result > 0:
            raise ValueError(f"must be > 0, got {result!r}")
        return result
    return coerce


def _optional(base: Coercer) -> Coercer:
    def coerce(value: Any):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        return base(value)
    return coerce


def _choice(options: tuple[str, ...]) -> Coercer:
    def coerce(value: Any) -> str:
        if not isinstance(value, str) or value not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return value
    return coerce


def _unit_interval(value: Any) -> float:
    result = _as_float(value)
    if not 0.0 <= result <= 1.0:
        raise ValueError(f"must lie in [0, 1], got {result!r}")
    return result


def _float_list(value: Any) -> list[float]:
    if not isinstance(value, (list, tuple)):
        raise ValueError("must be a list of numbers")
    return [_as_float(v) for v in value]


def _weight_pairs(value: Any) -> list[list[float]]:
    if not isinstance(value, (list, tuple)):
        raise ValueError("must be a list of [lambda_pixel, lambda_depth] pairs")
    pairs = []
    for item in value:
        pair = _float_list(item)
        if len(pair) != 2 or min(pair) < 0:
            raise ValueError(f"each entry must be two non-negative weights, got {item!r}")
        pairs.append(pair)
    return pairs


def _optional_str(value: Any) -> Optional[str]:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ValueError("must be a string")
    return value


def _str(value: Any) -> str:
    if not isinstance(value, str) or not value:
        raise ValueError("must be a non-empty string")
    return value


_positive_int = _positive(_as_int)
_positive_float = _positive(_as_float)
_non_negative_int = _at_least(0, _as_int)
_non_negative_float = _at_least(0.0, _as_float)


# ============================================================================
# Section tables
# ============================================================================

SYNTH_FIELDS: dict[str, Coercer] = {
    "width": _positive_int,
    "height": _positive_int,
    "fov_deg": _positive_float,
    "n_train": _at_least(2, _as_int),
    "n_test": _non_negative_int,
    "rig_radius": _positive_float,
    "rig_arc_deg": _positive_float,
    "rig_height": _as_float,
    "near": _positive_float,
    "far": _positive_float,
    "points_per_view": _positive_int,
    "pair_recall": _unit_interval,
    "pixel_noise_std": _non_negative_float,
    "outlier_fraction": _unit_interval,
    "confidence_falloff_px": _positive_float,
    "augment": parse_bool,
}

PREPROCESS_FIELDS: dict[str, Coercer] = {
    "augment": parse_bool,
    "propagate": parse_bool,
    "filter": parse_bool,
    "d_max": _positive_int,
    "dedup_radius_px": _non_negative_float,
    "projection_threshold_px": _positive_float,
    "knn_k": _positive_int,
    "std_multiplier": _positive_float,
    "ratio_floor": _non_negative_float,
    "max_rounds": _optional(_positive_int),
    "exact_knn_limit": _non_negative_int,
}

FIELD_FIELDS: dict[str, Coercer] = {
    "num_frequencies_position": _non_negative_int,
    "num_frequencies_direction": _non_negative_int,
    "hidden_layers": _positive_int,
    "hidden_width": _positive_int,
    "color_width": _positive_int,
    "activation": _choice(ACTIVATIONS),
}

TRAIN_FIELDS: dict[str, Coercer] = {
    "iterations": _non_negative_int,
    "batch_rays": _positive_int,
    "max_pairs": _non_negative_int,
    "samples_per_ray": _at_least(2, _as_int),
    "lr": _positive_float,
    "lr_final_ratio": _positive_float,
    "lambda_pixel": _non_negative_float,
    "lambda_depth": _non_negative_float,
    "log_every": _positive_int,
    "trace_views": _non_negative_int,
    "trace_stride": _positive_int,
}

EVAL_FIELDS: dict[str, Coercer] = {
    "samples_per_ray": _at_least(2, _as_int),
    "chamfer_stride": _positive_int,
    "write_images": parse_bool,
}

ABLATION_FIELDS: dict[str, Coercer] = {
    "noise_levels": _float_list,
    "loss_settings": _weight_pairs,
}

ROOT_FIELDS: dict[str, Coercer] = {
    "scene": _choice(SCENE_NAMES),
    "scene_path": _optional_str,
    "camera_path": _optional_str,
    "output_dir": _str,
    "seed": _non_negative_int,
    "threads": _positive_int,
}


def _apply_fields(target: Any, override: Any, fields: dict[str, Coercer], section: str) -> None:
    if not isinstance(override, dict):
        raise ConfigError(f"config section '{section}' must be an object", key=section)
    for key, value in override.items():
        dotted = f"{section}.{key}"
        coerce = fields.get(key)
        if coerce is None:
            raise ConfigError(f"unknown config key: {dotted}", key=dotted)
        try:
            setattr(target, key, coerce(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {dotted}: {value!r} ({exc})", key=dotted) from None


# ============================================================================
# apply_override functions, one per typed dataclass
# ============================================================================


def apply_override_synth_config(target: SynthConfig, override: Any) -> None:
    _apply_fields(target, override, SYNTH_FIELDS, "synth")
    if target.near >= target.far:
        raise ConfigError(f"synth.near ({target.near}) must be below synth.far ({target.far})", key="synth.near")
    if target.outlier_fraction >= 1.0:
        raise ConfigError("synth.outlier_fraction must be < 1", key="synth.outlier_fraction")


def apply_override_preprocess_config(target: PreprocessConfig, override: Any) -> None:
    _apply_fields(target, override, PREPROCESS_FIELDS, "preprocess")


def apply_override_field_config(target: FieldConfig, override: Any) -> None:
    _apply_fields(target, override, FIELD_FIELDS, "model")


def apply_override_train_config(target: TrainConfig, override: Any) -> None:
    _apply_fields(target, override, TRAIN_FIELDS, "train")
    if target.lr_final_ratio > 1.0:
        raise ConfigError("train.lr_final_ratio must be <= 1", key="train.lr_final_ratio")


def apply_override_eval_config(target: EvalConfig, override: Any) -> None:
    _apply_fields(target, override, EVAL_FIELDS, "eval")


def apply_override_ablation_config(target: AblationConfig, override: Any) -> None:
    _apply_fields(target, override, ABLATION_FIELDS, "ablation")


SECTION_APPLIERS: dict[str, Callable[[Any, Any], None]] = {
    "synth": apply_override_synth_config,
    "preprocess": apply_override_preprocess_config,
    "model": apply_override_field_config,
    "train": apply_override_train_config,
    "eval": apply_override_eval_config,
    "ablation": apply_override_ablation_config,
}


def apply_override_config(target: ExperimentConfig, override: Any) -> None:
    """Apply a partial override dict to an ExperimentConfig in place.

    Top-level scalars are coerced directly; nested sections recurse via
    their own apply_override_* function.
    """
    if not isinstance(override, dict):
        raise ConfigError("configuration root must be an object")
    for key, value in override.items():
        applier = SECTION_APPLIERS.get(key)
        if applier is not None:
            applier(getattr(target, key), value)
            continue
        coerce = ROOT_FIELDS.get(key)
        if coerce is None:
            raise ConfigError(f"unknown config key: {key}", key=key)
        try:
            setattr(target, key, coerce(value))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key}: {value!r} ({exc})", key=key) from None
