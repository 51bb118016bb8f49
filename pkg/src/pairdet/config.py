"""Config schema, YAML loading, and dotted-key overrides.

Precedence is defaults -> file values -> command-line overrides. Unknown
keys and type mismatches are rejected up front, naming the offending key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .dataset import SynthesisParams


class ConfigError(ValueError):
    """Bad config file, key, or value."""


@dataclass
class ModelConfig:
    backbone_widths: tuple[int, int, int, int] = (16, 32, 64, 128)
    fusion_width: int = 64
    head_width: int = 64


@dataclass
class FtaConfig:
    enabled: bool = True
    adaptive_weight: bool = True
    confidence_threshold: float = 0.6


@dataclass
class BdaConfig:
    enabled: bool = True


@dataclass
class ContrastiveConfig:
    enabled: bool = True
    temperature: float = 0.07
    weight: float = 0.3


@dataclass
class LossConfig:
    size_weight: float = 0.1
    offset_weight: float = 1.0


@dataclass
class AugmentConfig:
    enabled: bool = True
    crop: bool = True
    min_crop_scale: float = 0.6
    rotate: bool = True
    flip: bool = True


@dataclass
class DataConfig:
    input_size: tuple[int, int] = (512, 512)  # (H, W)
    augment: AugmentConfig = field(default_factory=AugmentConfig)


@dataclass
class TrainConfig:
    epochs: int = 64
    batch_size: int = 32
    learning_rate: float = 1e-4
    min_learning_rate: float = 1e-5
    weight_decay: float = 5e-4


@dataclass
class InferConfig:
    score_threshold: float = 0.3
    max_detections: int = 100


@dataclass
class EvalConfig:
    criterion: str = "center_in_box"
    iou_threshold: float = 0.5


@dataclass
class PipelineConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    fta: FtaConfig = field(default_factory=FtaConfig)
    bda: BdaConfig = field(default_factory=BdaConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthesis: SynthesisParams = field(default_factory=SynthesisParams)

    def validate(self) -> None:
        if self.loss.size_weight < 0 or self.loss.offset_weight < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.contrastive.weight < 0:
            raise ConfigError("contrastive.weight must be nonnegative")
        if self.contrastive.temperature <= 0:
            raise ConfigError("contrastive.temperature must be positive")
        if not 0.0 <= self.fta.confidence_threshold <= 1.0:
            raise ConfigError("fta.confidence_threshold must be in [0, 1]")
        if not 0.0 <= self.infer.score_threshold <= 1.0:
            raise ConfigError("infer.score_threshold must be in [0, 1]")
        h, w = self.data.input_size
        if h % 16 != 0 or w % 16 != 0:
            raise ConfigError(f"data.input_size {h}x{w} must be divisible by 16")
        if self.train.epochs < 1 or self.train.batch_size < 1:
            raise ConfigError("train.epochs and train.batch_size must be >= 1")
        if self.eval.criterion not in ("center_in_box", "iou"):
            raise ConfigError(f"eval.criterion must be center_in_box or iou, "
                              f"got {self.eval.criterion!r}")
        if not 0.0 < self.data.augment.min_crop_scale <= 1.0:
            raise ConfigError("data.augment.min_crop_scale must be in (0, 1]")


def _from_dict(cls: type, values: dict[str, Any], prefix: str = "") -> Any:
    """Build a dataclass instance from a nested plain dict, rejecting
    unknown keys and coercing/validating scalar types per field."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in values.items():
        path = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(f"unknown config key: {path}")
        kwargs[key] = _coerce(fields[key], value, path)
    return cls(**kwargs)


def _coerce(f: dataclasses.Field, value: Any, path: str) -> Any:
    default = f.default if f.default is not dataclasses.MISSING else (
        f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"config key {path} expects a mapping, got {value!r}")
        return _from_dict(type(default), value, prefix=path + ".")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path} expects a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {path} expects a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if value is None and default is None:
            return None
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"config key {path} expects a list, got {value!r}")
        if default and len(value) != len(default) and not _variadic_tuple(f):
            raise ConfigError(
                f"config key {path} expects {len(default)} entries, got {len(value)}")
        return tuple(_coerce_scalar(v, default[0] if default else v, f"{path}[{i}]")
                     for i, v in enumerate(value))
    # optional fields (e.g. synthesis.velocities) default to None
    if default is None:
        if value is None:
            return None
        if isinstance(value, (list, tuple)):
            return tuple(tuple(float(x) for x in v) for v in value)
        raise ConfigError(f"config key {path} expects a list or null, got {value!r}")
    raise ConfigError(f"config key {path} has unsupported type")


def _variadic_tuple(f: dataclasses.Field) -> bool:
    return "..." in str(f.type)


def _coerce_scalar(value: Any, like: Any, path: str) -> Any:
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {path} expects a boolean, got {value!r}")
        return value
    if isinstance(like, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {path} expects an integer, got {value!r}")
        return value
    if isinstance(like, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {path} expects a number, got {value!r}")
        return float(value)
    return value


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """Parse one ``dotted.key=value`` pair; values go through YAML so
    numbers, booleans, and lists come out typed."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, _, raw = item.partition("=")
    key = key.strip()
    if not key:
        raise ConfigError(f"override has an empty key: {item!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value for {key}: {exc}") from exc
    if isinstance(value, str):
        # YAML 1.1 reads bare scientific notation like 1e-3 as a string
        for cast in (int, float):
            try:
                return key.split("."), cast(value)
            except ValueError:
                pass
    return key.split("."), value


def overrides_to_dict(overrides: list[str]) -> dict:
    tree: dict = {}
    for item in overrides:
        path, value = parse_override(item)
        node = tree
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path conflicts at {part} in {item!r}")
        node[path[-1]] = value
    return tree


def load_config(path: Path | str | None = None, overrides: list[str] | None = None,
                seed: int | None = None) -> tuple[PipelineConfig, dict]:
    """Resolve defaults, file, and overrides into a validated config.

    Returns the config plus the raw merged dict of explicitly provided
    keys (file + overrides), which callers use to detect intentional
    architecture changes.
    """
    provided: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        provided = loaded
    if overrides:
        provided = _deep_merge(provided, overrides_to_dict(overrides))
    if seed is not None:
        provided = _deep_merge(provided, {"seed": int(seed)})

    config = _from_dict(PipelineConfig, provided)
    config.validate()
    return config, provided


def config_from_dict(values: dict) -> PipelineConfig:
    """Build and validate a config from a plain nested dict (e.g. a
    checkpoint snapshot)."""
    config = _from_dict(PipelineConfig, values)
    config.validate()
    return config


def config_to_dict(config: PipelineConfig) -> dict:
    return dataclasses.asdict(config)


def save_config(config: PipelineConfig, path: Path | str) -> Path:
    """Write the fully resolved config as YAML (lists for tuples)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        return obj

    path.write_text(yaml.safe_dump(clean(config_to_dict(config)), sort_keys=False))
    return path
