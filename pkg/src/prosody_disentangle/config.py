"""Pipeline configuration and its flat ``section.key = value`` text format.

Example::

    # comments start with '#'
    seed = 0
    paths.manifest = corpus/manifest.txt
    units.vocab_size = 50
    model.preset = desk
    model.prosody_dim = 128
    train.max_steps = 2000
    train.speed_factors = 0.9, 1.0, 1.1

Keys without a section prefix are top-level fields. ``model.preset`` is applied
first and the remaining ``model.*`` keys override it. Tuples are written as
comma-separated values, booleans as true/false.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from .dsp import DSPConfig
from .model import ModelConfig, preset
from .ser import SESSION_MODE
from .train import TrainConfig

ENV_RUN_DIR = "PDIS_RUN_DIR"
ENV_CACHE_DIR = "PDIS_CACHE_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class UnitConfig:
    vocab_size: int = 50
    feature_source: str = "mfcc_fallback"  # or "external_ssl"
    features_dir: str = ""  # PFEA files named <utt_id>.pfea when external
    feature_dim: int = 0  # 0 = take from the first file
    seed: int = 0
    max_iters: int = 100
    subsample: int = 0  # 0 = use every frame
    subsample_seed: int = 0


@dataclass
class SERConfig:
    mode: str = SESSION_MODE
    epochs: int = 30
    encoder_lr: float = 1e-4
    head_lr: float = 5e-4
    batch_size: int = 16
    seed: int = 0
    external_rep: str = ""  # optional utt_id|floats file for fusion


@dataclass
class EVCConfig:
    lr: float = 1e-5
    max_steps: int = 200
    eval_every: int = 50
    vocode_iters: int = 60
    pairs: Tuple[str, ...] = ("neutral:angry", "neutral:happy", "neutral:sad")


@dataclass
class PathConfig:
    manifest: str = ""
    ser_manifest: str = ""  # defaults to manifest
    evc_manifest: str = ""
    probe_manifest: str = ""
    run_dir: str = ""  # defaults to $PDIS_RUN_DIR or ./runs/default


@dataclass
class PipelineConfig:
    seed: int = 0
    dsp: DSPConfig = field(default_factory=DSPConfig)
    units: UnitConfig = field(default_factory=UnitConfig)
    model: ModelConfig = field(default_factory=lambda: preset("desk"))
    train: TrainConfig = field(default_factory=TrainConfig)
    ser: SERConfig = field(default_factory=SERConfig)
    evc: EVCConfig = field(default_factory=EVCConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def run_dir(self) -> Path:
        return Path(self.paths.run_dir or os.environ.get(ENV_RUN_DIR, "runs/default"))

    def manifest_path(self, kind: str = "") -> Path:
        value = getattr(self.paths, f"{kind}_manifest", "") if kind else ""
        value = value or self.paths.manifest
        if not value:
            raise ConfigError("paths.manifest is not set")
        return Path(value)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, vocab_size=self.units.vocab_size)

    def section_hash(self, *names: str) -> str:
        payload = {n: _plain(getattr(self, n)) for n in names}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


SECTIONS = ("dsp", "units", "model", "train", "ser", "evc", "paths")


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _parse_value(text: str, typ, name: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if origin in (tuple, typing.Tuple):
            inner = typing.get_args(typ)[0]
            return tuple(_parse_value(t, inner, name) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from exc
    raise ConfigError(f"{name}: unsupported field type {typ}")


def _field_types(cls) -> Dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def apply_overrides(cfg: PipelineConfig, pairs: Dict[str, str]) -> PipelineConfig:
    """Return a new config with ``section.key -> text`` overrides applied."""
    grouped: Dict[str, Dict[str, str]] = {}
    top: Dict[str, str] = {}
    for key, value in pairs.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section {sec!r} in {key!r}")
            grouped.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    new = dataclasses.replace(cfg)
    for key, value in top.items():
        types = {k: v for k, v in _field_types(PipelineConfig).items() if k not in SECTIONS}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(new, key, _parse_value(value, types[key], key))
    for sec, values in grouped.items():
        current = getattr(new, sec)
        types = _field_types(type(current))
        unknown = sorted(set(values) - set(types))
        if unknown:
            raise ConfigError(f"unknown keys in section {sec!r}: {unknown}")
        parsed = {k: _parse_value(v, types[k], f"{sec}.{k}") for k, v in values.items()}
        try:
            if sec == "model" and "preset" in parsed:
                base = preset(parsed.pop("preset"))
                setattr(new, sec, dataclasses.replace(base, **parsed))
            else:
                setattr(new, sec, dataclasses.replace(current, **parsed))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section {sec!r}: {exc}") from exc
    return new


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """Defaults, then the config file, then explicit overrides (e.g. CLI flags)."""
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"{path}: no such config file")
        cfg = apply_overrides(cfg, parse_config_text(path.read_text(), str(path)))
        base = path.parent
        for name in ("manifest", "ser_manifest", "evc_manifest", "probe_manifest", "run_dir"):
            v = getattr(cfg.paths, name)
            if v and not Path(v).is_absolute():
                setattr(cfg.paths, name, str(base / v))
        if cfg.units.features_dir and not Path(cfg.units.features_dir).is_absolute():
            cfg.units.features_dir = str(base / cfg.units.features_dir)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    lines = [f"seed = {cfg.seed}"]
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{sec}.{f.name} = {v}")
    return "\n".join(lines) + "\n"
