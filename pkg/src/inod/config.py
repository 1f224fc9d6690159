"""Run configuration: one TOML file drives every CLI command.

The file carries the mask, encoder, train, and augmentation settings plus
dataset paths. Every key has a default, unknown keys fail fast with the
offending name, and `section.key=value` overrides (from CLI flags) are
applied to the parsed mapping before validation.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .encoder import EncoderConfig, LevelSpec
from .errors import ConfigError
from .masks import MaskGenConfig
from .train import AugmentationConfig, TrainConfig

__all__ = ["RunConfig", "load_run_config"]

_SCHEMA: dict[str, set[str]] = {
    "": {"seed"},
    "paths": {"source_dir", "noise_dir", "out_dir", "stats_cache"},
    "mask": {"crop", "granularity", "target_fraction", "tolerance", "scale_sampling", "downsample"},
    "encoder": {"stem", "levels", "inject_levels", "neck_channels"},
    "train": {
        "epochs",
        "batch_size",
        "base_lr",
        "momentum",
        "weight_decay",
        "lr_decay_factor",
        "milestone_fractions",
        "focal_alpha",
        "focal_gamma",
        "supervision",
        "precision",
    },
    "augment": {
        "hflip_prob",
        "blur_prob",
        "blur_sigma",
        "grayscale_prob",
        "jitter_prob",
        "jitter_strength",
    },
}


def _reject_unknown(data: dict) -> None:
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in _SCHEMA or key == "":
                raise ConfigError(f"unknown config section [{key}]")
            for sub in value:
                if sub not in _SCHEMA[key]:
                    raise ConfigError(f"unknown config key {key}.{sub}")
        elif key not in _SCHEMA[""]:
            raise ConfigError(f"unknown config key {key}")


def _get(data: dict, section: str, key: str, kind, default):
    value = data.get(section, {}).get(key, default) if section else data.get(key, default)
    if value is None:
        return None
    label = f"{section}.{key}" if section else key
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{label} must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{label} must be a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{label} must be a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{label} must be a list, got {value!r}")
        return value
    raise AssertionError(kind)


def _level_spec(raw, label: str) -> LevelSpec:
    if not (isinstance(raw, list) and len(raw) == 3 and all(isinstance(v, int) for v in raw)):
        raise ConfigError(f"{label} must be [out_channels, kernel, stride], got {raw!r}")
    return LevelSpec(out_channels=raw[0], kernel=raw[1], stride=raw[2])


@dataclass(frozen=True)
class RunConfig:
    seed: int
    source_dir: Path | None
    noise_dir: Path | None
    out_dir: Path | None
    stats_cache: Path | None
    crop: int
    granularity: int
    target_fraction: float
    tolerance: float
    scale_sampling: str
    downsample: str
    encoder: EncoderConfig
    train: TrainConfig
    augment: AugmentationConfig

    def mask_config(self, seed: int | None = None) -> MaskGenConfig:
        return MaskGenConfig(
            crop_h=self.crop,
            crop_w=self.crop,
            stride=self.granularity,
            target_fraction=self.target_fraction,
            tolerance=self.tolerance,
            seed=self.seed if seed is None else seed,
            scale_sampling=self.scale_sampling,
        )

    def require_path(self, name: str) -> Path:
        value = getattr(self, name)
        if value is None:
            raise ConfigError(f"paths.{name} is required for this command")
        return value


def _parse_override(text: str) -> tuple[str, str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    dotted, raw_value = text.split("=", 1)
    dotted = dotted.strip()
    if "." in dotted:
        section, key = dotted.split(".", 1)
    else:
        section, key = "", dotted
    try:
        value = tomllib.loads(f"v = {raw_value.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw_value.strip()
    return section, key, value


def load_run_config(path=None, overrides: list[str] = ()) -> RunConfig:
    """Parse a TOML run config (or pure defaults) and apply dotted overrides."""
    if path is not None:
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = tomllib.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"malformed TOML in {path}: {exc}") from exc
    else:
        data = {}

    for text in overrides:
        section, key, value = _parse_override(text)
        if section:
            data.setdefault(section, {})
            if not isinstance(data[section], dict):
                raise ConfigError(f"config key {section} is not a section")
            data[section][key] = value
        else:
            data[key] = value

    _reject_unknown(data)

    seed = _get(data, "", "seed", int, 0)
    paths = {
        name: (Path(p) if p is not None else None)
        for name, p in (
            ("source_dir", _get(data, "paths", "source_dir", str, None)),
            ("noise_dir", _get(data, "paths", "noise_dir", str, None)),
            ("out_dir", _get(data, "paths", "out_dir", str, None)),
            ("stats_cache", _get(data, "paths", "stats_cache", str, None)),
        )
    }

    crop = _get(data, "mask", "crop", int, 224)
    granularity = _get(data, "mask", "granularity", int, 4)
    target_fraction = _get(data, "mask", "target_fraction", float, 0.2)
    tolerance = _get(data, "mask", "tolerance", float, 0.02)
    scale_sampling = _get(data, "mask", "scale_sampling", str, "interval")
    downsample = _get(data, "mask", "downsample", str, "coverage")

    stem = _level_spec(_get(data, "encoder", "stem", list, [8, 4, 2]), "encoder.stem")
    levels_raw = _get(
        data, "encoder", "levels", list, [[16, 4, 2], [32, 4, 2], [64, 4, 2], [128, 4, 2]]
    )
    levels = tuple(
        _level_spec(spec, f"encoder.levels[{i}]") for i, spec in enumerate(levels_raw)
    )
    inject_raw = _get(data, "encoder", "inject_levels", list, None)
    if inject_raw is not None and not all(isinstance(v, int) for v in inject_raw):
        raise ConfigError("encoder.inject_levels must be a list of integers")
    encoder = EncoderConfig(
        stem=stem,
        levels=levels,
        inject_levels=tuple(inject_raw) if inject_raw is not None else None,
        neck_channels=_get(data, "encoder", "neck_channels", int, 32),
        seed=seed,
    )

    milestones_raw = _get(data, "train", "milestone_fractions", list, [0.6, 0.8])
    if len(milestones_raw) != 2 or not all(isinstance(v, (int, float)) for v in milestones_raw):
        raise ConfigError("train.milestone_fractions must be two numbers")
    train = TrainConfig(
        epochs=_get(data, "train", "epochs", int, 10),
        batch_size=_get(data, "train", "batch_size", int, 8),
        base_lr=_get(data, "train", "base_lr", float, 0.02),
        momentum=_get(data, "train", "momentum", float, 0.9),
        weight_decay=_get(data, "train", "weight_decay", float, 1e-4),
        lr_decay_factor=_get(data, "train", "lr_decay_factor", float, 0.1),
        milestone_fractions=(float(milestones_raw[0]), float(milestones_raw[1])),
        crop=crop,
        target_fraction=target_fraction,
        granularity=granularity,
        mask_tolerance=tolerance,
        scale_sampling=scale_sampling,
        mask_downsample=downsample,
        focal_alpha=_get(data, "train", "focal_alpha", float, 0.25),
        focal_gamma=_get(data, "train", "focal_gamma", float, 2.0),
        supervision=_get(data, "train", "supervision", str, "canonical"),
        precision=_get(data, "train", "precision", str, "single"),
        seed=seed,
    )

    sigma_raw = _get(data, "augment", "blur_sigma", list, [0.1, 2.0])
    strength_raw = _get(data, "augment", "jitter_strength", list, [0.4, 0.4, 0.4, 0.1])
    if len(sigma_raw) != 2:
        raise ConfigError("augment.blur_sigma must be [low, high]")
    if len(strength_raw) != 4:
        raise ConfigError("augment.jitter_strength must be [brightness, contrast, saturation, hue]")
    augment = AugmentationConfig(
        hflip_prob=_get(data, "augment", "hflip_prob", float, 0.5),
        blur_prob=_get(data, "augment", "blur_prob", float, 0.5),
        blur_sigma=(float(sigma_raw[0]), float(sigma_raw[1])),
        grayscale_prob=_get(data, "augment", "grayscale_prob", float, 0.2),
        jitter_prob=_get(data, "augment", "jitter_prob", float, 0.8),
        jitter_strength=tuple(float(v) for v in strength_raw),
    )

    return RunConfig(
        seed=seed,
        crop=crop,
        granularity=granularity,
        target_fraction=target_fraction,
        tolerance=tolerance,
        scale_sampling=scale_sampling,
        downsample=downsample,
        encoder=encoder,
        train=train,
        augment=augment,
        **paths,
    )
