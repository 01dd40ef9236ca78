"""Hierarchical experiment configuration with dotted-path overrides."""
from __future__ import annotations

import copy
import os
from dataclasses import fields
from pathlib import Path
from typing import Any

import yaml

from .model import ModelConfig
from .preprocess import AugmentationPolicy
from .pretrain import TrainConfig

DATA_ROOT_ENV = "SONOCLIP_DATA_ROOT"


class ConfigError(ValueError):
    """Carries one message per offending field."""

    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _dataclass_defaults(cls, instance) -> dict:
    out = {}
    for f in fields(cls):
        v = getattr(instance, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data_root": None,
    "phantom": {
        "n_patients": 500,
        "images_per_patient": 5,
        "size": 64,
        "class_mix": ["abdomen", "brain", "femur", "heart", "cervix"],
        "annotate_fraction": 0.2,
        "test_fraction": 0.2,
        "ga_mean": 148.0,
        "ga_std": 16.0,
        "ga_distribution": "normal",
    },
    "preprocess": {"size": 64},
    "curate": {
        "shard_size": 512,
        "vocab_size": 2048,
        "upsample": {"textbook": 10, "standard_view": 1, "multi_keyword": 1, "unlabeled": 1},
        "pseudo_label_threshold": 0.9,
    },
    "model": _dataclass_defaults(ModelConfig, ModelConfig.toy()),
    "train": {k: v for k, v in _dataclass_defaults(TrainConfig, TrainConfig.toy()).items() if k != "seed"},
    "augment": {k: v for k, v in _dataclass_defaults(AugmentationPolicy, AugmentationPolicy()).items() if k != "seed"},
    "pretrain": {"val_fraction": 0.1, "metadata_free_captions": True},
    "zeroshot": {"prompt_style": "caption", "prompts_file": None, "quantiles_file": None, "top_k": 15},
    "probe": {
        "tasks": ["view"],
        "lr": 0.5,
        "epochs": 300,
        "l2": 1e-4,
        "n_folds": 5,
        "n_seeds": 5,
        "support_sizes": [],
        "timestamps": False,
        "seg_epochs": 30,
        "seg_feature_size": 16,
        "chd_videos": 40,
        "chd_mode": "concatenate",
    },
    "interpret": {"layer": None, "n_images": 8, "projection": "pca", "temperature": 1.0},
}

_NULLABLE = {"data_root", "zeroshot.prompts_file", "zeroshot.quantiles_file", "interpret.layer", "train.grad_clip"}


def _check(user: dict, ref: dict, prefix: str, errors: list[str]) -> None:
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in ref:
            errors.append(f"{path}: unknown field")
            continue
        expected = ref[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                errors.append(f"{path}: expected a mapping")
            elif path != "curate.upsample":
                _check(value, expected, path + ".", errors)
            continue
        if value is None:
            if path not in _NULLABLE:
                errors.append(f"{path}: may not be null")
            continue
        if expected is None:
            continue
        if isinstance(expected, bool):
            ok = isinstance(value, bool)
        elif isinstance(expected, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(expected, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(expected, list):
            ok = isinstance(value, list)
        else:
            ok = isinstance(value, type(expected))
        if not ok:
            errors.append(f"{path}: expected {type(expected).__name__}, got {type(value).__name__}")


def _merge(base: dict, user: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "upsample":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError([f"override {item!r}: expected dotted.key=value"])
    return key.split("."), yaml.safe_load(raw)


def apply_overrides(cfg: dict, overrides) -> dict:
    for item in overrides or ():
        path, value = parse_override(item)
        node = cfg
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError([f"{'.'.join(path)}: parent is not a mapping"])
        node[path[-1]] = value
    return cfg


def load_config(path=None, overrides=None) -> dict:
    """Defaults <- YAML file <- ``a.b=value`` overrides, then validation."""
    user: dict = {}
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"config file {path}: {exc}"]) from exc
        if not isinstance(user, dict):
            raise ConfigError([f"config file {path}: top level must be a mapping"])
    user = apply_overrides(user, overrides)
    errors: list[str] = []
    _check(user, DEFAULTS, "", errors)
    if errors:
        raise ConfigError(errors)
    cfg = _merge(DEFAULTS, user)
    if cfg["data_root"] is None:
        cfg["data_root"] = os.environ.get(DATA_ROOT_ENV, "data")
    validate(cfg)
    return cfg


def model_config(cfg: dict, **overrides) -> ModelConfig:
    m = dict(cfg["model"])
    m.update(overrides)
    return ModelConfig(**m)


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["betas"] = tuple(t["betas"])
    return TrainConfig(**t, seed=cfg["seed"])


def augmentation_policy(cfg: dict) -> AugmentationPolicy:
    return AugmentationPolicy(**{k: tuple(v) for k, v in cfg["augment"].items()}, seed=cfg["seed"])


def validate(cfg: dict) -> None:
    """Semantic checks that need more than a type test."""
    errors = []
    for section, build in (("model", model_config), ("train", train_config), ("augment", augmentation_policy)):
        try:
            build(cfg)
        except (TypeError, ValueError) as exc:
            errors.append(f"{section}: {exc}")
    p = cfg["phantom"]
    if p["n_patients"] < 1:
        errors.append("phantom.n_patients: must be >= 1")
    if p["images_per_patient"] < 1:
        errors.append("phantom.images_per_patient: must be >= 1")
    if not 0 <= p["test_fraction"] < 1:
        errors.append("phantom.test_fraction: must lie in [0, 1)")
    if not 0 <= p["annotate_fraction"] <= 1:
        errors.append("phantom.annotate_fraction: must lie in [0, 1]")
    if p["ga_distribution"] not in ("normal", "uniform"):
        errors.append("phantom.ga_distribution: must be 'normal' or 'uniform'")
    if not 0 < cfg["pretrain"]["val_fraction"] < 1:
        errors.append("pretrain.val_fraction: must lie in (0, 1)")
    if cfg["preprocess"]["size"] != cfg["model"]["image_size"]:
        errors.append("preprocess.size: must equal model.image_size")
    if cfg["curate"]["shard_size"] < cfg["train"]["batch_size"]:
        errors.append("curate.shard_size: must be at least train.batch_size")
    if cfg["zeroshot"]["prompt_style"] not in ("caption", "typical"):
        errors.append("zeroshot.prompt_style: must be 'caption' or 'typical'")
    for t in cfg["probe"]["tasks"]:
        if t not in ("view", "seg", "chd"):
            errors.append(f"probe.tasks: unknown task {t!r}")
    if cfg["interpret"]["projection"] not in ("pca", "umap-like"):
        errors.append("interpret.projection: must be 'pca' or 'umap-like'")
    if errors:
        raise ConfigError(errors)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
