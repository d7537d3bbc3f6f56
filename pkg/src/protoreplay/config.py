"""Experiment configuration: YAML file, strict schema, dotted ``key=value`` overrides.

Guidance weight, drop rate, DE weight, replay size, prototype optimizer,
weight decays, clip norm and the 1000-step schedule with 100 DDIM steps use
the usual full-scale values; step counts and learning rates are scaled
down for CPU runs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .conditioning import INIT_STRATEGIES
from .data import SCENARIOS, SPLITS
from .errors import ConfigError
from .sampler import SAMPLER_KINDS

METHODS = ("cpdm", "no_prototype_gr", "finetuning")


@dataclass
class DataConfig:
    name: str = "gaussian_mixture"
    n_tasks: int = 3
    classes_per_task: int = 2
    split: str = "equal"
    scenario: str = "CI"
    task_classes: typing.Optional[list] = None
    train_per_class: typing.Optional[int] = None
    test_per_class: typing.Optional[int] = None


@dataclass
class ScheduleConfig:
    K: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class EmbeddingConfig:
    source: str = "hash"
    path: typing.Optional[str] = None
    dim: int = 16


@dataclass
class DenoiserConfig:
    hidden: int = 128
    width: int = 32
    time_dim: int = 32
    cross_attention: bool = False


@dataclass
class DiffusionConfig:
    steps_per_task: int = 2000
    first_task_steps: typing.Optional[int] = None
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    gamma: float = 1e-4
    delta: float = 0.2


@dataclass
class PrototypeConfig:
    init: str = "most_confident"
    lr: float = 0.01
    weight_decay: float = 0.01


@dataclass
class SamplerConfig:
    kind: str = "ddim"
    inference_steps: int = 100
    w: float = 4.0
    samples_per_class: int = 20
    fid_samples_per_class: int = 50
    # clamp predicted clean samples to the stream's value range when it has one
    clip_to_data_range: bool = True


@dataclass
class ClassifierConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hidden: int = 64


@dataclass
class ExperimentConfig:
    seed: int = 0
    method: str = "cpdm"
    save_checkpoints: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    embeddings: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    prototype: PrototypeConfig = field(default_factory=PrototypeConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _coerce(value, tp, name, errors):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        if value is None:
            return None
        inner = [a for a in typing.get_args(tp) if a is not type(None)][0]
        return _coerce(value, inner, name, errors)
    if tp is bool:
        if isinstance(value, bool):
            return value
        errors.append(f"{name}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            errors.append(f"{name}: expected an integer, got {value!r}")
            return value
        try:
            f = float(value)
            if f != int(f):
                raise ValueError
            return int(f)
        except ValueError:
            errors.append(f"{name}: expected an integer, got {value!r}")
            return value
    if tp is float:
        # YAML reads "1e-4" as a string
        try:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        except (TypeError, ValueError):
            errors.append(f"{name}: expected a number, got {value!r}")
            return value
    if tp is str:
        if not isinstance(value, str):
            errors.append(f"{name}: expected a string, got {value!r}")
        return value
    if tp is list:
        if not isinstance(value, list):
            errors.append(f"{name}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, raw, prefix, errors):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{prefix or 'config'}: expected a mapping, got {raw!r}")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            errors.append(f"{prefix}{key}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        tp = hints[f.name]
        dotted = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, raw[f.name], dotted + ".", errors)
        else:
            kwargs[f.name] = _coerce(raw[f.name], tp, dotted, errors)
    return cls(**kwargs)


def _check_values(cfg: ExperimentConfig, errors, base_dir=None):
    def need(cond, msg):
        if not cond:
            errors.append(msg)

    num = lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)
    need(cfg.method in METHODS, f"method: must be one of {METHODS}, got {cfg.method!r}")
    d = cfg.data
    need(d.name in ("gaussian_mixture", "digits"), f"data.name: unknown dataset {d.name!r}")
    need(d.scenario in SCENARIOS, f"data.scenario: must be one of {SCENARIOS}")
    need(d.split in SPLITS, f"data.split: must be one of {SPLITS}")
    need(num(d.n_tasks) and d.n_tasks >= 1, "data.n_tasks: must be >= 1")
    if d.name == "digits":
        need(d.train_per_class is None and d.test_per_class is None,
             "data.train_per_class/test_per_class: only supported for gaussian_mixture")
    s = cfg.schedule
    need(num(s.K) and s.K >= 2, "schedule.K: must be an integer >= 2")
    need(num(s.beta_start) and 0 < s.beta_start < 1, "schedule.beta_start: must lie in (0, 1)")
    need(num(s.beta_end) and 0 < s.beta_end < 1, "schedule.beta_end: must lie in (0, 1)")
    if num(s.beta_start) and num(s.beta_end):
        need(s.beta_start <= s.beta_end, "schedule.beta_start: must not exceed beta_end")
    e = cfg.embeddings
    need(e.source in ("hash", "file"), f"embeddings.source: must be 'hash' or 'file', got {e.source!r}")
    if e.source == "file":
        if not e.path:
            errors.append("embeddings.path: required when embeddings.source is 'file'")
        else:
            p = Path(e.path)
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            need(p.exists(), f"embeddings.path: file not found: {e.path}")
    need(num(e.dim) and e.dim >= 1, "embeddings.dim: must be >= 1")
    df = cfg.diffusion
    need(num(df.gamma) and df.gamma >= 0, "diffusion.gamma: must be >= 0")
    need(num(df.delta) and 0 <= df.delta <= 1, "diffusion.delta: must lie in [0, 1]")
    need(num(df.steps_per_task) and df.steps_per_task >= 1, "diffusion.steps_per_task: must be >= 1")
    need(num(df.batch_size) and df.batch_size >= 1, "diffusion.batch_size: must be >= 1")
    need(num(df.clip_norm) and df.clip_norm > 0, "diffusion.clip_norm: must be > 0")
    need(cfg.prototype.init in INIT_STRATEGIES,
         f"prototype.init: must be one of {INIT_STRATEGIES}, got {cfg.prototype.init!r}")
    sm = cfg.sampler
    need(sm.kind in SAMPLER_KINDS, f"sampler.kind: must be one of {SAMPLER_KINDS}")
    need(num(sm.w) and sm.w >= 0, "sampler.w: must be >= 0")
    need(num(sm.samples_per_class) and sm.samples_per_class >= 1, "sampler.samples_per_class: must be >= 1")
    if num(sm.inference_steps) and num(s.K):
        need(1 <= sm.inference_steps <= s.K, "sampler.inference_steps: must lie in 1..K")
        if sm.kind == "ancestral":
            need(sm.inference_steps == s.K, "sampler.inference_steps: ancestral sampling needs all K steps")
    c = cfg.classifier
    need(num(c.epochs) and c.epochs >= 1, "classifier.epochs: must be >= 1")
    need(num(c.lr) and c.lr > 0, "classifier.lr: must be > 0")


def config_from_dict(raw: dict, base_dir=None) -> ExperimentConfig:
    """Validate and build a config, reporting every violation at once."""
    errors = []
    cfg = _build(ExperimentConfig, raw, "", errors)
    if not errors:
        _check_values(cfg, errors, base_dir)
    if errors:
        raise ConfigError("invalid config", errors)
    e = cfg.embeddings
    if e.path and base_dir is not None and not Path(e.path).is_absolute():
        # snapshots are read from other directories, so pin the path now
        cfg.embeddings.path = str((Path(base_dir) / e.path).resolve())
    return cfg


def _leaf_paths(cls, prefix=""):
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            yield from _leaf_paths(tp, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}"


def resolve_key(key: str) -> str:
    """Map a dotted key, or an unambiguous leaf name such as ``gamma``, to its full path."""
    paths = list(_leaf_paths(ExperimentConfig))
    if key in paths:
        return key
    matches = [p for p in paths if p.split(".")[-1] == key or p.endswith("." + key)]
    if len(matches) == 1:
        return matches[0]
    if not matches:
        raise ConfigError(f"unknown config key {key!r}")
    raise ConfigError(f"ambiguous config key {key!r}: {', '.join(matches)}")


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key=value`` strings to a raw config mapping; values parse as YAML scalars."""
    out = json.loads(json.dumps(raw or {}))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        path = resolve_key(key.strip()).split(".")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(value)
    return out


def load_raw(path) -> dict:
    raw = yaml.safe_load(Path(path).read_text())
    return raw or {}


def load_config(path, overrides=None) -> ExperimentConfig:
    raw = apply_overrides(load_raw(path), overrides)
    return config_from_dict(raw, base_dir=Path(path).parent)
