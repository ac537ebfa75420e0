"""Experiment configuration: one JSON document, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field

from .datagen import AugmentConfig, ModalitySpec, SceneSpec, source_modality, target_modality


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    eps: float = 1e-8
    decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass(frozen=True)
class DataConfig:
    scene: SceneSpec = SceneSpec()
    source_modality: ModalitySpec = field(default_factory=source_modality)
    target_modality: ModalitySpec = field(default_factory=target_modality)
    n_source_train: int = 200
    n_source_val: int = 32
    n_target_train: int = 200
    n_target_test: int = 64
    # scene seeds per split; source and target use disjoint geometry
    source_seed: int = 1
    source_val_seed: int = 2
    target_seed: int = 3
    target_test_seed: int = 4
    file_format: str = "sfsd"


@dataclass(frozen=True)
class NetworkConfig:
    enc_channels: int = 16
    latent_dim: int = 8
    latent_relu: bool = False
    init_seed: int = 0


@dataclass(frozen=True)
class SfsConfig:
    lam: float = 0.5
    rho: float = 0.97
    omega: int = 3
    source_iters: int = 5000
    adapt_iters: int = 3000
    batch_size: int = 8
    pixels_per_batch: int = 1024
    projections: int = 64
    source_optim: OptimConfig = OptimConfig(lr=1e-3, eps=1e-6, decay=1e-6)
    adapt_optim: OptimConfig = OptimConfig(lr=1e-4, eps=1e-8, decay=1e-3)
    # "internal": fitted class frequencies; "batch_pseudo": predicted labels of the target batch
    class_proportions: str = "internal"
    finetune_classifier: bool = True
    class_weighted_ce: bool = False
    augment: bool = False
    augmentation: AugmentConfig = AugmentConfig()
    eval_every: int = 250
    em_reg: float = 1e-4
    em_max_iters: int = 200
    em_tol: float = 1e-6
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError("rho must satisfy 0 <= rho < 1")
        if self.omega < 1:
            raise ConfigError("omega must be >= 1")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.class_proportions not in ("internal", "batch_pseudo"):
            raise ConfigError("class_proportions must be 'internal' or 'batch_pseudo'")
        for name in ("source_iters", "adapt_iters", "batch_size", "pixels_per_batch", "projections", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")


# Slow, conservative optimizer settings for full-size volumes; too slow for the desk-scale defaults.
LARGE_SCALE_SOURCE_OPTIM = OptimConfig(lr=1e-4, eps=1e-6, decay=1e-6)
LARGE_SCALE_ADAPT_OPTIM = OptimConfig(lr=5e-5, eps=1e-1, decay=1e-6)


@dataclass(frozen=True)
class AblationConfig:
    kind: str = "omega"
    grid: tuple = (1, 3)


@dataclass(frozen=True)
class EvalConfig:
    embed_pixels_per_image: int = 64


@dataclass(frozen=True)
class Config:
    data: DataConfig = DataConfig()
    network: NetworkConfig = NetworkConfig()
    sfs: SfsConfig = SfsConfig()
    ablation: AblationConfig = AblationConfig()
    evaluation: EvalConfig = EvalConfig()

    def validate(self):
        try:
            self.data.scene.validate()
            self.data.source_modality.validate()
            self.data.target_modality.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self.sfs.validate()
        if self.ablation.kind not in ("omega", "rho", "finetune"):
            raise ConfigError(f"unknown ablation kind {self.ablation.kind!r}")
        if self.data.file_format not in ("sfsd", "csv"):
            raise ConfigError("file_format must be 'sfsd' or 'csv'")
        return self

    def replace(self, **sections):
        """Shallow per-section override, e.g. ``cfg.replace(sfs={"omega": 1})``."""
        out = self
        for name, changes in sections.items():
            section = dataclasses.replace(getattr(out, name), **changes)
            out = dataclasses.replace(out, **{name: section})
        return out


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = _coerce(hints[key], value, f"{path}.{key}" if path else key)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _coerce(tp, value, path):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    origin = typing.get_origin(tp)
    if origin is tuple or tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    return value


def config_from_dict(data) -> Config:
    return _build(Config, data, "").validate()


def load_config(path) -> Config:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def config_hash(cfg) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
