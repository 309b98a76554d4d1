"""Experiment configuration: a YAML file validated against a JSON schema before any compute."""

from __future__ import annotations

import copy
import dataclasses

import jsonschema
import yaml

from .domains import BenchmarkConfig, DomainSpec, default_benchmark_config
from .errors import ConfigError
from .mtstn import MTSTNConfig
from .trainers import MODES, TrainConfig

_NUM = {"type": "number"}
_INT = {"type": "integer"}

_DOMAIN = {
    "type": "object",
    "additionalProperties": False,
    "required": ["name", "palette"],
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "palette": {
            "type": "array",
            "items": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
        },
        "noise_sigma": {"type": "number", "minimum": 0},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "blur_radius": {"type": "integer", "minimum": 0},
        "texture_seed": _INT,
    },
}

_TRAIN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda_con": {"type": "number", "minimum": 0},
        "lambda_out": {"type": "number", "minimum": 0},
        "lambda_fro": {"type": "number", "minimum": 0},
        "alpha": {"type": "number", "minimum": 0, "maximum": 1},
        "iterations": {"type": "integer", "minimum": 1},
        "warmup": {"type": ["integer", "null"], "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "warmup_lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "lr_d": {"type": "number", "exclusiveMinimum": 0},
        "betas_d": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "weight_decay_d": {"type": "number", "minimum": 0},
        "poly_power": {"type": "number", "minimum": 0},
        "d_steps": {"type": "integer", "minimum": 1},
        "seed": _INT,
        "augmentation": {"enum": ["cutmix", "gaussian", "none"]},
        "style_transfer": {"type": "boolean"},
        "teacher_view": {"enum": ["raw", "transferred"]},
        "noise_sigma": {"type": "number", "minimum": 0},
        "grad_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "con_rampup": {"type": "integer", "minimum": 0},
        "norm": {"enum": ["none", "group"]},
        "init": {"enum": ["pretrained", "scratch"]},
        "log_every": {"type": "integer", "minimum": 1},
    },
}

_MTSTN = {
    "type": "object",
    "additionalProperties": False,
    "properties": {f.name: (_INT if f.type in ("int", int) else _NUM) for f in dataclasses.fields(MTSTNConfig)},
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "segadapt experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["method", "output"],
    "properties": {
        "benchmark": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "image_size": {"type": "array", "items": {"type": "integer", "minimum": 16}, "minItems": 2, "maxItems": 2},
                "train_size": {"type": "integer", "minimum": 1},
                "eval_size": {"type": "integer", "minimum": 1},
                "seed": _INT,
                "source": _DOMAIN,
                "targets": {"type": "array", "items": _DOMAIN, "minItems": 1},
                "unseen": _DOMAIN,
            },
        },
        "mtstn": _MTSTN,
        "method": {
            "type": "object",
            "additionalProperties": False,
            "required": ["mode"],
            "properties": {
                "mode": {"enum": list(MODES)},
                "pretrain": _TRAIN,
                "adapt": _TRAIN,
                "checkpoint": {"type": "string"},
                "mtstn_checkpoint": {"type": "string"},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dir"],
            "properties": {
                "dir": {"type": "string", "minLength": 1},
                "checkpoints": {"type": "boolean"},
                "overlays": {"type": "integer", "minimum": 0},
                "plots": {"type": "boolean"},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "items": _INT, "minItems": 1},
                "alpha": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
                "lambda_con": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "lambda_out": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "augmentation": {"type": "array", "items": {"enum": ["cutmix", "gaussian", "none"]}, "minItems": 1},
                "lambda_fro": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            },
        },
    },
}

DEFAULT_SWEEP = {
    "alpha": [0.0, 0.5, 0.9, 0.99, 0.999, 0.9999, 1.0],
    "lambda_con": [0.0, 1.0, 10.0, 100.0],
    "lambda_out": [0.0, 1e-4, 1e-3, 1e-2],
    "augmentation": ["none", "gaussian", "cutmix"],
    "lambda_fro": [0.0, 100.0],
}


class SchemaError(ConfigError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path or '<root>'}: {message}")


def validate(raw):
    """Raise :class:`SchemaError` naming the offending key path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    err = errors[0]
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = [k for k in err.validator_value if k not in err.instance]
        path = ".".join(filter(None, [path, missing[0]]))
        raise SchemaError(path, "required key is missing")
    if err.validator == "additionalProperties":
        extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
        path = ".".join(filter(None, [path, extra[0]]))
        raise SchemaError(path, "unknown key")
    raise SchemaError(path, err.message)


@dataclasses.dataclass
class ExperimentConfig:
    raw: dict
    benchmark: BenchmarkConfig
    mtstn: MTSTNConfig
    mode: str
    pretrain: TrainConfig
    adapt: TrainConfig
    output: dict
    sweep: dict
    checkpoint: str | None = None
    mtstn_checkpoint: str | None = None

    def with_seed(self, seed):
        """Override the training seeds (the benchmark stays fixed)."""
        raw = copy.deepcopy(self.raw)
        for stage in ("pretrain", "adapt"):
            raw["method"].setdefault(stage, {})["seed"] = seed
        raw.setdefault("mtstn", {})["seed"] = seed
        return from_dict(raw)

    def with_output(self, out_dir):
        raw = copy.deepcopy(self.raw)
        raw["output"]["dir"] = str(out_dir)
        return from_dict(raw)


def _benchmark(section):
    base = default_benchmark_config()
    kw = {}
    for key in ("train_size", "eval_size", "seed"):
        if key in section:
            kw[key] = section[key]
    if "image_size" in section:
        kw["image_size"] = tuple(section["image_size"])
    if "source" in section:
        kw["source"] = DomainSpec.from_dict(section["source"])
    if "targets" in section:
        kw["targets"] = [DomainSpec.from_dict(t) for t in section["targets"]]
    if "unseen" in section:
        kw["unseen"] = DomainSpec.from_dict(section["unseen"])
    return dataclasses.replace(base, **kw)


def from_dict(raw):
    validate(raw)
    method = raw["method"]
    pretrain = TrainConfig(**method.get("pretrain", {}))
    adapt = TrainConfig(**method.get("adapt", method.get("pretrain", {})))
    sweep = {**DEFAULT_SWEEP, **raw.get("sweep", {})}
    return ExperimentConfig(
        raw=copy.deepcopy(raw),
        benchmark=_benchmark(raw.get("benchmark", {})),
        mtstn=MTSTNConfig(**raw.get("mtstn", {})),
        mode=method["mode"],
        pretrain=pretrain,
        adapt=adapt,
        output={"checkpoints": True, "overlays": 0, "plots": True, **raw["output"]},
        sweep=sweep,
        checkpoint=method.get("checkpoint"),
        mtstn_checkpoint=method.get("mtstn_checkpoint"),
    )


def load(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise SchemaError("", f"not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("", "top level must be a mapping")
    return from_dict(raw)


def snapshot(cfg: ExperimentConfig):
    """Fully resolved config (defaults filled in) that reproduces the run on its own."""
    out = {
        "benchmark": cfg.benchmark.to_dict(),
        "mtstn": cfg.mtstn.to_dict(),
        "method": {"mode": cfg.mode, "pretrain": cfg.pretrain.to_dict(), "adapt": cfg.adapt.to_dict()},
        "output": dict(cfg.output),
        "sweep": {k: list(v) for k, v in cfg.sweep.items()},
    }
    if cfg.checkpoint:
        out["method"]["checkpoint"] = cfg.checkpoint
    if cfg.mtstn_checkpoint:
        out["method"]["mtstn_checkpoint"] = cfg.mtstn_checkpoint
    return out
