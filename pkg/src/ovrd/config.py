"""Flat JSON configuration shared by all commands.

Defaults reproduce the reference hyperparameters. ``DESK_PRESET`` holds the
overrides used for the desk-scale synthetic runs.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path
from typing import Optional

from .evalkit import EvalConfig, PipelineConfig
from .relcls import RelationTrainConfig
from .synth import SynthConfig
from .trackletcls import TrackletTrainConfig

DEFAULTS = {
    "seed": 0,
    # tracklet classifier
    "iou_threshold": 0.5,
    "lambda_distill": 5.0,
    "use_bg_embedding": False,
    "init_tau": 0.07,
    # relation classifier
    "stage": "two_stage",
    "ablation_mode": "repro",
    "pair_iou_threshold": 0.5,
    "prompt_length": 10,
    "gamma": -0.3,
    "align_weight": 1.0,
    # optimisation; per-stage keys override the shared ones when set
    "lr": 1e-4,
    "steps": 1000,
    "batch_size": 64,
    "hidden": 768,
    "eval_every": 100,
    "val_fraction": 0.1,
    "tracklet_lr": None,
    "tracklet_steps": None,
    "prompt_lr": None,
    "prompt_steps": None,
    "v2l_lr": None,
    "v2l_steps": None,
    # segments, association, evaluation
    "seg_len": 30,
    "stride": 15,
    "top_k": 5,
    "merge_viou": 0.5,
    "viou_threshold": 0.5,
    "eval_mode": "PredCls",
}

_SYNTH_KEYS = {f.name for f in fields(SynthConfig)} - {"seed", "gamma"}
for _f in fields(SynthConfig):
    if _f.name in _SYNTH_KEYS:
        DEFAULTS[_f.name] = _f.default
DEFAULTS["relations_per_video"] = list(SynthConfig().relations_per_video)

DESK_PRESET = {
    "lr": 1e-3,
    "hidden": 128,
    "batch_size": 64,
    "tracklet_steps": 300,
    "prompt_lr": 1e-4,
    "prompt_steps": 1000,
    "v2l_steps": 400,
    "eval_every": 50,
    "top_k": 1,
    "relations_per_video": [3, 5],
}

STAGES = ("two_stage", "joint")


class ConfigError(ValueError):
    pass


def desk_config(overrides: Optional[dict] = None) -> dict:
    """Defaults with ``DESK_PRESET`` applied, then ``overrides``."""
    return load_config(None, {**DESK_PRESET, **(overrides or {})})


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the file (if any), then ``overrides``; unknown keys are errors."""
    conf = dict(DEFAULTS)
    layers = []
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        layers.append(doc)
    layers.append({k: v for k, v in (overrides or {}).items() if v is not None})
    for layer in layers:
        for k, v in layer.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            conf[k] = v
    if conf["stage"] not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}")
    return conf


def _stage(conf: dict, prefix: str, key: str):
    v = conf.get(f"{prefix}_{key}")
    return conf[key] if v is None else v


def tracklet_config(conf: dict) -> TrackletTrainConfig:
    return TrackletTrainConfig(
        iou_threshold=conf["iou_threshold"], lambda_distill=conf["lambda_distill"],
        use_bg_embedding=conf["use_bg_embedding"], lr=_stage(conf, "tracklet", "lr"),
        steps=_stage(conf, "tracklet", "steps"), batch_size=conf["batch_size"], hidden=conf["hidden"],
        init_tau=conf["init_tau"], eval_every=conf["eval_every"], val_fraction=conf["val_fraction"],
        seed=conf["seed"])


def relation_config(conf: dict, stage: str = "prompt", mode: Optional[str] = None) -> RelationTrainConfig:
    mode = mode or ("repro_dagger" if conf["stage"] == "joint" else conf["ablation_mode"])
    return RelationTrainConfig(
        ablation_mode=mode, pair_iou_threshold=conf["pair_iou_threshold"], gamma=conf["gamma"],
        seg_len=conf["seg_len"], stride=conf["stride"], lr=_stage(conf, stage, "lr"),
        steps=_stage(conf, stage, "steps"), batch_size=conf["batch_size"], hidden=conf["hidden"],
        prompt_length=conf["prompt_length"], align_weight=conf["align_weight"],
        eval_every=conf["eval_every"], val_fraction=conf["val_fraction"], seed=conf["seed"])


def pipeline_config(conf: dict) -> PipelineConfig:
    return PipelineConfig(conf["seg_len"], conf["stride"], conf["top_k"], conf["merge_viou"], conf["gamma"])


def eval_config(conf: dict, mode: Optional[str] = None, split: str = "novel") -> EvalConfig:
    return EvalConfig(mode or conf["eval_mode"], split, conf["viou_threshold"])


def synth_config(conf: dict) -> SynthConfig:
    kw = {k: conf[k] for k in _SYNTH_KEYS}
    return SynthConfig(seed=conf["seed"], gamma=conf["gamma"], **kw)
