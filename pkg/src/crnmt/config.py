"""Run configuration: one flat, typed key-value file with a section per module.

Every field has a default (the reference recipe value where one exists, the
desk-scale default otherwise). Unknown keys are rejected by name. Flags
override file values via ``apply_override`` ("section.key=value").
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentConfig
from .decoding import DecodeConfig
from .filtering import FilterConfig
from .model import TransformerConfig
from .objective import ConsistencyConfig, LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


@dataclass(frozen=True)
class DataConfig:
    train_src: str = ""
    train_tgt: str = ""
    valid_src: str = ""
    valid_tgt: str = ""
    test_src: str = ""
    test_tgt: str = ""
    augmented: str = ""      # filter output (x<TAB>u<TAB>y lines)
    merges: str = ""         # learned merge table
    vectors: str = ""        # word-vector file for the semantic filter
    run_dir: str = "run"
    num_merges: int = 3000
    min_freq: int = 1


@dataclass(frozen=True)
class RunConfig:
    model: TransformerConfig = field(default_factory=TransformerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: DataConfig = field(default_factory=DataConfig)


# [train] carries the loss weights and consistency switches as flat keys
_TRAIN_FLAT = {
    "lambda1": ("weights", "lambda1", float),
    "lambda2": ("weights", "lambda2", float),
    "consistency_mode": ("consistency", "mode", str),
    "kl_direction": ("consistency", "kl_direction", str),
    "detach_teacher": ("consistency", "detach_teacher", bool),
    "kl_normalization": ("consistency", "normalization", str),
}

_SECTIONS = {
    "model": TransformerConfig,
    "train": TrainConfig,
    "filter": FilterConfig,
    "augment": AugmentConfig,
    "decode": DecodeConfig,
    "data": DataConfig,
}


def _coerce(raw: str, typ, key: str):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    try:
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    if raw == "" and key.endswith("lexicon_path"):
        return None
    return raw


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        t = f.type
        if t in ("int", int):
            out[f.name] = int
        elif t in ("float", float):
            out[f.name] = float
        elif t in ("bool", bool):
            out[f.name] = bool
        elif t in ("str", str, "str | None"):
            out[f.name] = str
        else:
            out[f.name] = None  # nested dataclass; handled via _TRAIN_FLAT
    return out


def _set_value(cfg: RunConfig, section: str, key: str, raw: str) -> RunConfig:
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    sub = getattr(cfg, section)
    if section == "train" and key in _TRAIN_FLAT:
        attr, inner_key, typ = _TRAIN_FLAT[key]
        inner = getattr(sub, attr)
        try:
            new_inner = replace(inner, **{inner_key: _coerce(raw, typ, f"train.{key}")})
            new_sub = replace(sub, **{attr: new_inner})
        except ValueError as exc:
            raise ConfigError(f"bad value for train.{key}: {exc}") from exc
        return replace(cfg, train=new_sub)
    types = _field_types(type(sub))
    if key not in types or types[key] is None:
        raise ConfigError(f"unknown key {section}.{key}")
    value = _coerce(raw, types[key], f"{section}.{key}")
    try:
        new_sub = replace(sub, **{key: value})
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
    return replace(cfg, **{section: new_sub})


def load_run_config(path) -> RunConfig:
    """Parse an INI-style run configuration, rejecting unknown keys."""
    parser = configparser.ConfigParser(interpolation=None)
    text = Path(path).read_text(encoding="utf-8")
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config {path}: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        for key, raw in parser.items(section):
            cfg = _set_value(cfg, section, key, raw)
    return cfg


def apply_override(cfg: RunConfig, spec: str) -> RunConfig:
    """Apply one "section.key=value" override (CLI flags beat file values)."""
    if "=" not in spec or "." not in spec.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {spec!r}")
    dotted, raw = spec.split("=", 1)
    section, key = dotted.split(".", 1)
    return _set_value(cfg, section.strip(), key.strip(), raw.strip())


def dump_run_config(cfg: RunConfig) -> str:
    """Serialize back to the INI format (documents every effective value)."""
    lines = []
    for section, sub in (("model", cfg.model), ("train", cfg.train),
                         ("filter", cfg.filter), ("augment", cfg.augment),
                         ("decode", cfg.decode), ("data", cfg.data)):
        lines.append(f"[{section}]")
        for f in fields(sub):
            value = getattr(sub, f.name)
            if dataclasses.is_dataclass(value):
                continue
            if value is None:
                value = ""
            lines.append(f"{f.name} = {value}")
        if section == "train":
            lines.append(f"lambda1 = {cfg.train.weights.lambda1}")
            lines.append(f"lambda2 = {cfg.train.weights.lambda2}")
            lines.append(f"consistency_mode = {cfg.train.consistency.mode}")
            lines.append(f"kl_direction = {cfg.train.consistency.kl_direction}")
            lines.append(f"detach_teacher = {cfg.train.consistency.detach_teacher}")
            lines.append(f"kl_normalization = {cfg.train.consistency.normalization}")
        lines.append("")
    return "\n".join(lines)
