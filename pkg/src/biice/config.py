"""Run configuration files: one JSON document with model/train/loss/synth/paths sections."""
from __future__ import annotations

import json
from dataclasses import MISSING, fields

import jsonschema

from .data import SynthConfig
from .model import NORM_AXES, BiIceConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """The run configuration is invalid; carries the JSON path of the offending key."""

    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path


def _section(cls, overrides: dict, skip=()) -> dict:
    props = {}
    required = []
    for f in fields(cls):
        if f.name in skip:
            continue
        t = str(f.type)
        if t == "int":
            props[f.name] = {"type": "integer"}
        elif t == "float":
            props[f.name] = {"type": "number"}
        else:
            props[f.name] = {"type": "string"}
        props[f.name].update(overrides.get(f.name, {}))
        if f.default is MISSING:
            required.append(f.name)
    return {"type": "object", "properties": props, "required": required, "additionalProperties": False}


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": _section(BiIceConfig, {
            "n_concepts": {"minimum": 1}, "dim": {"minimum": 1}, "n_patches": {"minimum": 1},
            "n_classes": {"minimum": 1}, "n_global": {"minimum": 0}, "t_inner": {"minimum": 1},
            "norm_axis": {"enum": list(NORM_AXES)},
        }),
        "train": _section(TrainConfig, {
            "batch_size": {"minimum": 1}, "epochs": {"minimum": 1}, "warmup_iters": {"minimum": 0},
            "base_lr": {"minimum": 0}, "weight_decay": {"minimum": 0}, "snapshot_every": {"minimum": 1},
            "dtype": {"enum": ["float64", "float32"]},
        }, skip=("lambda_expl", "lambda_sparse")),
        "loss": {
            "type": "object", "additionalProperties": False,
            "properties": {"lambda_expl": {"type": "number", "minimum": 0},
                           "lambda_sparse": {"type": "number", "minimum": 0}},
        },
        "synth": _section(SynthConfig, {
            "n_classes": {"minimum": 1}, "n_planted": {"minimum": 1}, "dim": {"minimum": 1},
            "n_patches": {"minimum": 1}, "n_samples": {"minimum": 1}, "noise": {"minimum": 0},
            "concepts_per_class": {"minimum": 1}, "n_global": {"minimum": 0},
        }),
        "paths": {
            "type": "object", "additionalProperties": False,
            "properties": {k: {"type": "string"} for k in ("data", "ann", "val", "out", "params")},
        },
    },
}


def validate(doc) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "$" + "".join(f"[{p!r}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ConfigError(err.message, path)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    validate(doc)
    return doc


def model_config(doc: dict) -> BiIceConfig:
    if "model" not in doc:
        raise ConfigError("missing required section 'model'", "$.model")
    try:
        return BiIceConfig(**doc["model"])
    except ValueError as exc:
        raise ConfigError(str(exc), "$.model") from exc


def train_config(doc: dict) -> TrainConfig:
    try:
        return TrainConfig(**doc.get("train", {}), **doc.get("loss", {}))
    except ValueError as exc:
        raise ConfigError(str(exc), "$.train") from exc


def synth_config(doc: dict) -> SynthConfig:
    try:
        return SynthConfig(**doc.get("synth", {}))
    except ValueError as exc:
        raise ConfigError(str(exc), "$.synth") from exc
