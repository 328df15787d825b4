"""Layered run configuration: profile defaults, then a YAML file, then overrides.

Two profiles ship with the toolkit. ``paper`` carries the published training
hyperparameters (lr 1e-4 decaying by 0.1, 16 epochs, 256 to 224 crops, flip
probability 0.5, mu and beta both 15); ``desk`` shrinks every dimension so the
whole pipeline runs in CI minutes. The fully resolved configuration is
serialized into the run directory before any training step, and re-running
from that file reproduces the run.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Sequence

import yaml

from .align_trainer import AlignTrainConfig
from .data import Normalization, PreprocessSpec
from .distill_trainer import DistillTrainConfig
from .errors import ConfigError
from .metrics import IerConfig
from .models import EncoderSpec
from .runio import read_yaml

_BASE: dict[str, Any] = {
    "profile": "desk",
    "seed": 0,
    "run_dir": None,
    "bins": {"count": 10, "min": 1.0, "max": 10.0},
    "data": {
        "resize": 256,
        "crop": 224,
        "hflip_prob": 0.5,
        "scalar_label_mode": "linear-split",
        "teacher_norm": {"mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]},
        "student_norm": {"mean": [0.5, 0.5, 0.5], "std": [0.5, 0.5, 0.5]},
    },
    "teacher_encoder": {
        "family": "tiny_vit", "image_size": 224, "patch_size": 16,
        "depth": 4, "width": 128, "heads": 8, "feature_dim": 128,
        "init_seed": 0, "init_checkpoint": None,
    },
    "student_encoder": {
        "family": "tiny_vit", "image_size": 224, "patch_size": 16,
        "depth": 2, "width": 64, "heads": 4, "feature_dim": 64,
        "init_seed": 1, "init_checkpoint": None,
    },
    "projector": {"hidden": None},
    "head": {"hidden": None},
    "align": {
        "unlabeled_manifest": None,
        "teacher_source": "live",       # live | cache
        "cache_path": None,
        "lr": 1.0e-4,
        "decay_factor": 0.1,
        "decay_epochs": [5],
        "epochs": 16,
        "batch_size": 32,
        "epsilon": 1.0e-8,
        "grad_clip": None,
    },
    "distill": {
        "labeled_manifest": None,
        "unlabeled_manifest": None,
        "eval_manifest": None,
        "teacher_init": None,           # alignment backbone checkpoint (teacher)
        "teacher_checkpoint": None,     # fine-tuned teacher (backbone + head)
        "student_init": None,           # alignment backbone checkpoint (student)
        "lr": 1.0e-4,
        "decay_factor": 0.1,
        "decay_epochs": [5],
        "epochs": 16,
        "b_s": 4,
        "mu": 15,
        "beta": 15.0,
        "r": 2.0,
        "grad_clip": None,
    },
    "eval": {
        "batch_size": 64,
        "ier_intervals": 10,
        "ier_tolerance": 0.5,
        "ier_range": None,              # defaults to the bin range
    },
    "attn": {"probe_size": 64},
}

_PROFILE_OVERRIDES: dict[str, dict[str, Any]] = {
    # published hyperparameters, full-size inputs
    "paper": {},
    # everything shrunk to desk scale
    "desk": {
        "data": {"resize": 36, "crop": 32},
        "teacher_encoder": {"image_size": 32, "patch_size": 4, "depth": 2,
                            "width": 64, "heads": 4, "feature_dim": 64},
        "student_encoder": {"image_size": 32, "patch_size": 4, "depth": 1,
                            "width": 32, "heads": 2, "feature_dim": 32},
        "align": {"lr": 1.0e-3, "decay_epochs": [3], "epochs": 4,
                  "batch_size": 16},
        "distill": {"lr": 1.0e-3, "decay_epochs": [8], "epochs": 10,
                    "b_s": 4, "mu": 3, "beta": 1.0},
        "eval": {"batch_size": 64},
        "attn": {"probe_size": 16},
    },
}


def profile_names() -> list[str]:
    return sorted(_PROFILE_OVERRIDES)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _apply_override(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[key]
    leaf = keys[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    node[leaf] = yaml.safe_load(raw)


def resolve_config(profile: str = "desk", config_file: str | Path | None = None,
                   overrides: Sequence[str] = ()) -> dict:
    """Defaults for ``profile``, deep-merged with a YAML file and ``k=v`` overrides.

    Unknown keys anywhere raise ``ConfigError`` naming the offending key.
    """
    if profile not in _PROFILE_OVERRIDES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {profile_names()}")
    cfg = _merge(_BASE, _PROFILE_OVERRIDES[profile])
    cfg["profile"] = profile
    if config_file is not None:
        loaded = read_yaml(config_file)
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_file} must hold a mapping")
        # a config file written by a previous run carries its profile name;
        # merging it over the same profile's defaults is a no-op by design
        cfg = _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        _apply_override(cfg, dotted.strip(), raw)
    return cfg


def config_fingerprint(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def bin_values(cfg: dict) -> tuple[float, ...]:
    spec = cfg["bins"]
    count, lo, hi = int(spec["count"]), float(spec["min"]), float(spec["max"])
    if count < 2:
        raise ConfigError("bins.count must be >= 2")
    if not lo < hi:
        raise ConfigError("bins.min must be below bins.max")
    step = (hi - lo) / (count - 1)
    return tuple(lo + i * step for i in range(count))


def preprocess_spec(cfg: dict, mode: str = "train") -> PreprocessSpec:
    d = cfg["data"]
    return PreprocessSpec(resize=int(d["resize"]), crop=int(d["crop"]),
                          hflip_prob=float(d["hflip_prob"]), mode=mode,
                          seed=int(cfg["seed"]))


def normalization(cfg: dict, branch: str) -> Normalization:
    n = cfg["data"][f"{branch}_norm"]
    return Normalization(mean=tuple(n["mean"]), std=tuple(n["std"]))


def encoder_spec(cfg: dict, which: str) -> EncoderSpec:
    e = cfg[f"{which}_encoder"]
    return EncoderSpec(family=e["family"], image_size=int(e["image_size"]),
                       patch_size=int(e["patch_size"]), depth=int(e["depth"]),
                       width=int(e["width"]), heads=int(e["heads"]),
                       feature_dim=int(e["feature_dim"]))


def align_config(cfg: dict) -> AlignTrainConfig:
    a = cfg["align"]
    return AlignTrainConfig(lr=float(a["lr"]), decay_factor=float(a["decay_factor"]),
                            decay_epochs=tuple(a["decay_epochs"]),
                            total_epochs=int(a["epochs"]),
                            batch_size=int(a["batch_size"]),
                            epsilon=float(a["epsilon"]),
                            grad_clip=a["grad_clip"])


def distill_config(cfg: dict) -> DistillTrainConfig:
    d = cfg["distill"]
    return DistillTrainConfig(lr=float(d["lr"]), decay_factor=float(d["decay_factor"]),
                              decay_epochs=tuple(d["decay_epochs"]),
                              total_epochs=int(d["epochs"]), b_s=int(d["b_s"]),
                              mu=int(d["mu"]), beta=float(d["beta"]),
                              r=float(d["r"]),
                              eval_batch_size=int(cfg["eval"]["batch_size"]),
                              scalar_label_mode=cfg["data"]["scalar_label_mode"],
                              grad_clip=d["grad_clip"])


def ier_config(cfg: dict) -> IerConfig:
    e = cfg["eval"]
    rng = e["ier_range"]
    if rng is None:
        bins = bin_values(cfg)
        rng = (bins[0], bins[-1])
    return IerConfig(k=int(e["ier_intervals"]), t=float(e["ier_tolerance"]),
                     lo=float(rng[0]), hi=float(rng[1]))
