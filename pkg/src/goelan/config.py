"""Model, loss, augmentation and training hyperparameters in one record.

Config files are INI-style: ``[model]``, ``[loss]``, ``[augment]``, ``[train]``
sections holding flat ``key = value`` pairs. Every key maps to one field of
:class:`ModelConfig`; unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Raised for invalid architectural or training configuration."""


def _f(section: str, default: Any = dataclasses.MISSING, **kwargs: Any) -> Any:
    meta = {"section": section}
    if default is dataclasses.MISSING:
        return field(metadata=meta, **kwargs)
    return field(default=default, metadata=meta, **kwargs)


@dataclass
class ModelConfig:
    # architecture
    class_count: int = _f("model", 10)
    input_size: int = _f("model", 640)
    width_preset: str = _f("model", "full")
    stem_widths: tuple[int, int] = _f("model", (512, 512))
    stage_widths: tuple[int, int, int, int] = _f("model", (256, 512, 1024, 1024))
    elan_widths: tuple[tuple[int, ...], ...] = _f(
        "model", ((32, 32), (128, 128), (256, 256), (512, 512))
    )
    neck_widths: tuple[int, int, int, int] = _f("model", (512, 256, 512, 1024))
    head_width: int = _f("model", 96)
    pool_sizes: tuple[int, ...] = _f("model", (5, 9, 13))
    head_strides: tuple[int, ...] = _f("model", (8, 16, 32))
    aux_enabled: bool = _f("model", True)
    aux_stem_widths: tuple[int, int] = _f("model", (64, 128))
    aux_stage_widths: tuple[int, int, int, int] = _f("model", (128, 256, 512, 512))
    aux_elan_widths: tuple[tuple[int, ...], ...] = _f(
        "model", ((32, 32), (64, 64), (256, 256), (384, 384))
    )
    # loss
    label_smoothing: float = _f("loss", 0.1)
    lambda_coord: float = _f("loss", 5.0)
    focal_alpha: float = _f("loss", 0.25)
    focal_gamma: float = _f("loss", 2.0)
    box_weight: float = _f("loss", 1.0)
    cls_weight: float = _f("loss", 1.0)
    obj_weight: float = _f("loss", 1.0)
    noobj_weight: float = _f("loss", 0.5)
    dfl_enabled: bool = _f("loss", False)
    dfl_weight: float = _f("loss", 1.0)
    dfl_bins: int = _f("loss", 16)
    aux_weight: float = _f("loss", 0.25)
    # post-processing / evaluation
    nms_iou: float = _f("model", 0.45)
    conf_thresh: float = _f("model", 0.25)
    eval_conf_thresh: float = _f("model", 0.001)
    max_detections: int = _f("model", 300)
    # augmentation
    mosaic: float = _f("augment", 1.0)
    mixup: float = _f("augment", 0.15)
    mixup_beta: float = _f("augment", 32.0)
    scale: float = _f("augment", 0.9)
    fliplr: float = _f("augment", 0.5)
    flipud: float = _f("augment", 0.1)
    blur: float = _f("augment", 0.01)
    clahe: float = _f("augment", 0.01)
    clahe_clip_limit: float = _f("augment", 2.0)
    clahe_tile_grid: int = _f("augment", 8)
    close_mosaic: int = _f("augment", 15)
    # training
    epochs: int = _f("train", 20)
    batch_size: int = _f("train", 8)
    lr0: float = _f("train", 0.01)
    lr_final: float = _f("train", 0.01)
    momentum: float = _f("train", 0.937)
    weight_decay: float = _f("train", 0.0005)
    warmup_epochs: float = _f("train", 3.0)
    warmup_momentum: float = _f("train", 0.8)
    seed: int = _f("train", 0)
    workers: int = _f("train", 0)
    double_precision: bool = _f("train", False)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if tuple(self.head_strides) != (8, 16, 32):
            raise ConfigError(f"head_strides must be (8, 16, 32), got {self.head_strides}")
        if len(self.elan_widths) != 4 or len(self.aux_elan_widths) != 4:
            raise ConfigError("elan_widths and aux_elan_widths need one entry per backbone stage")
        if not (0.0 < self.focal_alpha <= 1.0) or self.focal_gamma < 0:
            raise ConfigError("focal_alpha must be in (0, 1] and focal_gamma >= 0")
        for name in ("nms_iou", "conf_thresh", "eval_conf_thresh"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    def replace(self, **changes: Any) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {k: _coerce(known[k], v) for k, v in data.items()}
        return cls(**kwargs)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for f in dataclasses.fields(self):
            section = f.metadata["section"]
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, f.name, _format(getattr(self, f.name)))
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in parser.items(section))
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str, base: "ModelConfig | None" = None) -> "ModelConfig":
        parser = configparser.ConfigParser()
        parser.read_string(text)
        values: dict[str, str] = {}
        for section in parser.sections():
            values.update(parser.items(section))
        preset = values.pop("preset", None)
        if base is None:
            base = preset_config(preset or "full")
        return base.override(values)

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_ini(Path(path).read_text(encoding="utf-8"))

    def override(self, values: dict[str, Any]) -> "ModelConfig":
        """Return a copy with string or typed overrides applied."""
        known = {f.name: f for f in dataclasses.fields(self)}
        unknown = set(values) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        changes = {k: _coerce(known[k], v) for k, v in values.items()}
        return dataclasses.replace(self, **changes)


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(",".join(str(v) for v in row) for row in value)
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(f: dataclasses.Field, value: Any) -> Any:
    default = f.default
    if not isinstance(value, str):
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(tuple(int(x) for x in row) for row in value)
            return tuple(type(default[0])(x) for x in value)
        return value
    text = value.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if default and isinstance(default[0], tuple):
                return tuple(
                    tuple(int(x) for x in row.split(",") if x.strip())
                    for row in text.split(";")
                )
            return tuple(type(default[0])(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {f.name!r}: {value!r}") from exc
    return text


def full_config(**overrides: Any) -> ModelConfig:
    """Full-size preset: 512-wide stem and downsampling."""
    return ModelConfig(**overrides)


def toy_config(**overrides: Any) -> ModelConfig:
    """Same topology as the full preset with every width divided by 16."""
    full = ModelConfig()

    def div(v):
        if isinstance(v, tuple):
            return tuple(div(x) for x in v)
        return max(4, v // 16)

    params = dict(
        width_preset="toy",
        input_size=64,
        pool_sizes=(2,),
        stem_widths=div(full.stem_widths),
        stage_widths=div(full.stage_widths),
        elan_widths=div(full.elan_widths),
        neck_widths=div(full.neck_widths),
        head_width=div(full.head_width),
        aux_stem_widths=div(full.aux_stem_widths),
        aux_stage_widths=div(full.aux_stage_widths),
        aux_elan_widths=div(full.aux_elan_widths),
    )
    params.update(overrides)
    return ModelConfig(**params)


def overfit_config(**overrides: Any) -> ModelConfig:
    """Toy model with augmentation off and a decaying rate, for memorizing a tiny set.

    500 epochs of one batch each; the rate falls from 0.02 to 0.002 so the
    weights settle and batch-norm running statistics catch up before evaluation.
    """
    params = dict(
        class_count=3, mosaic=0.0, mixup=0.0, scale=0.0, fliplr=0.0, flipud=0.0, blur=0.0, clahe=0.0,
        epochs=500, batch_size=8, lr0=0.02, lr_final=0.002, warmup_epochs=1.0,
    )
    params.update(overrides)
    return toy_config(**params)


def full_reg_config(**overrides: Any) -> ModelConfig:
    """Full preset with the stronger 0.01 regularization coefficient used as weight decay."""
    params: dict[str, Any] = dict(weight_decay=0.01)
    params.update(overrides)
    return full_config(**params)


PRESETS = {"full": full_config, "full-reg": full_reg_config, "toy": toy_config, "overfit": overfit_config}


def preset_config(name: str, **overrides: Any) -> ModelConfig:
    try:
        return PRESETS[name](**overrides)
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
