"""Experiment configuration: one JSON document, schema-checked, hashed into every artifact."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .autoencoder.model import AutoencoderConfig
from .autoencoder.train import AETrainConfig
from .colorop.model import ColorOpConfig, ColorTrainConfig
from .decformer.model import DecformerConfig
from .decformer.train import DecformerTrainConfig
from .flow.model import FlowConfig
from .flow.train import FinetuneConfig, FlowTrainConfig

# section -> subsection -> dataclass supplying defaults and field names
SECTIONS: dict[str, dict[str, type]] = {
    "autoencoder": {"model": AutoencoderConfig, "train": AETrainConfig},
    "decformer": {"model": DecformerConfig, "train": DecformerTrainConfig},
    "flow": {"model": FlowConfig, "train": FlowTrainConfig, "finetune": FinetuneConfig},
    "colorop": {"model": ColorOpConfig, "train": ColorTrainConfig},
}

PLAIN_DEFAULTS: dict[str, dict[str, Any]] = {
    "data": {"image_size": 32, "n_train": 4096, "n_val": 256, "n_eval": 128, "eval_seed": 1234, "halo_px": 4},
    "ablation": {"seeds": [0, 1], "steps": 1500, "names": ["baseline", "no_halo_loss", "unconstrained_alpha_no_shift"]},
    "inpaint": {"n_eval": 96, "steps": 30, "lambda": 0.75, "seed": 0, "seam_px": 8},
    "color_eval": {"n_eval": 64},
    "erf": {"n_probes": 64, "eps": 1e-3, "delta": 0.05},
    "sdf": {"kind": "binary"},
}


def _json_type(value: Any) -> dict:
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, (list, tuple)):
        return {"type": "array"}
    return {}


def _object_schema(defaults: dict[str, Any]) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": {k: _json_type(v) for k, v in defaults.items()}}


def _dataclass_defaults(cls: type) -> dict[str, Any]:
    inst = cls()
    return {f.name: (list(v) if isinstance(v := getattr(inst, f.name), tuple) else v) for f in dataclasses.fields(cls)}


def default_config() -> dict[str, Any]:
    cfg: dict[str, Any] = {"seed": 0}
    for section, subs in SECTIONS.items():
        cfg[section] = {sub: _dataclass_defaults(cls) for sub, cls in subs.items()}
    cfg.update(copy.deepcopy(PLAIN_DEFAULTS))
    return cfg


def schema() -> dict:
    props: dict[str, Any] = {"seed": {"type": "integer"}, "name": {"type": "string"}}
    for section, subs in SECTIONS.items():
        props[section] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {sub: _object_schema(_dataclass_defaults(cls)) for sub, cls in subs.items()},
        }
    for section, defaults in PLAIN_DEFAULTS.items():
        props[section] = _object_schema(defaults)
    props["erf"]["properties"]["eps"] = {"type": "number", "exclusiveMinimum": 0}
    props["inpaint"]["properties"]["lambda"] = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
    return {"type": "object", "additionalProperties": False, "properties": props}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else copy.deepcopy(v)
    return out


PRESETS = ("desk", "micro")


class ConfigError(ValueError):
    pass


def resolve(overrides: dict | None = None) -> dict:
    """Validate ``overrides`` against the schema and merge them onto the defaults."""
    overrides = overrides or {}
    try:
        jsonschema.validate(overrides, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return _merge(default_config(), overrides)


def bundled(name: str) -> dict:
    text = resources.files("pelc").joinpath("configs", f"{name}.json").read_text()
    return json.loads(text)


def load_config(path: str | Path | None = None, seed: int | None = None) -> dict:
    """Resolve a config file (or a bundled preset ``desk``/``micro``); ``seed`` overrides the top-level seed."""
    if path is None:
        raw = bundled("desk")
    elif not Path(path).is_file() and str(path) in PRESETS:
        raw = bundled(str(path))
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    cfg = resolve(raw)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build(cls: type, values: dict):
    """Instantiate one of the config dataclasses from its resolved section."""
    return cls(**values)
