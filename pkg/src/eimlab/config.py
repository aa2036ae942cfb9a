"""Run configuration: JSON schemas per command, defaults and hashing."""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from eimlab.text import SHAPES_ATTRIBUTES

COMMANDS = ("edit", "sde", "probe", "theory", "train", "sweep", "semantic-loss")


class ConfigError(ValueError):
    pass


_pos_int = {"type": "integer", "minimum": 1}
_unit = {"type": "number", "minimum": 0, "maximum": 1}

SAMPLER = {
    "guidance_scale": {"type": "number", "minimum": 0},
    "forward_fraction": _unit,
    "deterministic_sampler": {"type": "boolean"},
}
HSDS = {
    "lam": {"type": "number", "minimum": 0},
    "eta_start": {"type": "number", "exclusiveMinimum": 0},
    "eta_end": {"type": "number", "exclusiveMinimum": 0},
    "iterations": {"type": "integer", "minimum": 0},
    "sign": {"enum": ["ascent", "descent"]},
    "z_s_mode": {"enum": ["context", "attribute"]},
}
MODEL = {
    "model": {"enum": ["analytic-disentangled", "analytic-entangled", "toy-joint", "toy-cross"]},
    "model_path": {"type": "string"},
    "entanglement": {"type": "number", "minimum": 0.3},
    "model_seed": {"type": "integer", "minimum": 0},
}
SCENE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["color", "object"],
    "properties": {
        "color": {"enum": ["red", "green", "blue"]},
        "object": {"enum": ["square", "circle"]},
        "size": {"enum": ["small", "medium", "large"]},
        "xpos": {"enum": ["left", "center", "right"]},
        "ypos": {"enum": ["top", "middle", "bottom"]},
    },
}
EDIT_ENTRY = {
    "type": "object",
    "additionalProperties": False,
    "required": ["attribute", "target"],
    "properties": {
        "attribute": {"enum": ["color", "object", "size", "xpos", "ypos"]},
        "target": {"type": "string"},
        "alpha": {"type": "number", "minimum": 0},
    },
}
TRAIN = {
    "mode": {"enum": ["joint", "cross"]},
    "dataset_size": _pos_int,
    "epochs": _pos_int,
    "batch_size": _pos_int,
    "lr": {"type": "number", "minimum": 0},
    "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "prompt_dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "layers": {"type": "integer", "minimum": 0},
    "heads": _pos_int,
    "export_dataset": {"type": "boolean"},
}


def _schema(props: dict, required=()) -> dict:
    base = {"command": {"enum": list(COMMANDS)}, "seed": {"type": "integer", "minimum": 0}}
    return {
        "type": "object",
        "additionalProperties": False,
        "properties": {**base, **props},
        "required": list(required),
    }


SCHEMAS = {
    "edit": _schema({
        **MODEL, **SAMPLER, **HSDS,
        "scene": SCENE,
        "edits": {"type": "array", "minItems": 1, "items": EDIT_ENTRY},
        "alpha": {"type": "number", "minimum": 0},
        "seeds": _pos_int,
        "reverse": {"type": "boolean"},
        "pooled_extra": {"type": "boolean"},
        "alpha_sweep": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
        "snapshot_every": {"type": "integer", "minimum": 0},
    }, ["scene", "edits"]),
    "sde": _schema({
        **SAMPLER,
        "models": {"type": "array", "minItems": 1, "items": {"enum": ["analytic-disentangled", "analytic-entangled"]}},
        "entanglement": MODEL["entanglement"],
        "model_seed": MODEL["model_seed"],
        "scenes": _pos_int,
        "batches": _pos_int,
        "seeds": _pos_int,
        "strength": _unit,
        "attributes": {"type": "array", "minItems": 1, "items": {"enum": ["color", "object"]}},
    }),
    "probe": _schema({
        **TRAIN,
        "guidance_scale": SAMPLER["guidance_scale"],
        "modes": {"type": "array", "minItems": 1, "items": {"enum": ["joint", "cross"]}},
        "model_paths": {"type": "object", "additionalProperties": {"type": "string"}},
        "per_color": _pos_int,
        "record_steps": {"type": "array", "items": _pos_int},
    }),
    "theory": _schema({
        "m": {"type": "array", "minItems": 1, "items": _pos_int},
        "d": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 4}},
        "alpha": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 1}},
        "samples": {"type": "integer", "minimum": 10000},
        "c": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
        "spot_samples": {"type": "integer", "minimum": 10000},
        "prop2_m": _pos_int,
        "prop2_d": _pos_int,
    }),
    "train": _schema(TRAIN),
    "sweep": _schema({
        "base": {"type": "object"},
        "grid": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {"type": "array", "minItems": 1},
        },
    }, ["base", "grid"]),
    "semantic-loss": _schema({
        **MODEL, **SAMPLER,
        "scene": SCENE,
        "strengths": {"type": "array", "minItems": 1, "items": _unit},
        "seeds": {"type": "integer", "minimum": 2},
        "conditioned": {"type": "array", "items": {"enum": ["article", "color", "object", "size", "xpos", "ypos"]}},
    }, ["scene"]),
}

DEFAULTS = {
    "edit": {
        "seed": 0, "model": "analytic-disentangled", "entanglement": 0.35, "model_seed": 0,
        "guidance_scale": 7.5, "forward_fraction": 0.75, "deterministic_sampler": False,
        "lam": 0.5, "eta_start": 0.1, "eta_end": 0.01, "iterations": 50, "sign": "ascent", "z_s_mode": "context",
        "seeds": 1, "reverse": False, "pooled_extra": False, "snapshot_every": 0,
    },
    "sde": {
        "seed": 0, "models": ["analytic-disentangled", "analytic-entangled"], "entanglement": 0.35,
        "model_seed": 0, "guidance_scale": 7.5, "forward_fraction": 0.75, "deterministic_sampler": False,
        "scenes": 100, "batches": 10, "seeds": 1, "strength": 0.75, "attributes": ["color", "object"],
    },
    "probe": {
        "seed": 0, "modes": ["joint", "cross"], "model_paths": {}, "dataset_size": 600, "epochs": 150,
        "batch_size": 32, "lr": 0.05, "momentum": 0.9, "prompt_dropout": 0.1, "layers": 4, "heads": 2,
        "export_dataset": False, "guidance_scale": 7.5, "per_color": 200,
    },
    "theory": {
        "seed": 0, "m": [1, 2, 4], "d": [4, 16, 64], "alpha": [1.0, 2.0], "samples": 100000,
        "c": [0.01, 0.1, 0.5, 1.0], "spot_samples": 1000000, "prop2_m": 8, "prop2_d": 32,
    },
    "train": {
        "seed": 0, "mode": "joint", "dataset_size": 600, "epochs": 150, "batch_size": 32, "lr": 0.05,
        "momentum": 0.9, "prompt_dropout": 0.1, "layers": 4, "heads": 2, "export_dataset": False,
    },
    "sweep": {"seed": 0},
    "semantic-loss": {
        "seed": 0, "model": "analytic-disentangled", "entanglement": 0.35, "model_seed": 0,
        "guidance_scale": 7.5, "forward_fraction": 0.75, "deterministic_sampler": False,
        "strengths": [0.15, 0.35, 0.55, 0.75], "seeds": 200, "conditioned": ["article", "color", "object"],
    },
}


def _first_error(validator, doc) -> jsonschema.ValidationError | None:
    errs = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    return errs[0] if errs else None


def validate(command: str, doc: dict) -> dict:
    """Validate ``doc`` for ``command`` and return it with defaults filled in."""
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if "command" in doc and doc["command"] != command:
        raise ConfigError(f"config is for {doc['command']!r}, not {command!r}")
    err = _first_error(jsonschema.Draft202012Validator(SCHEMAS[command]), doc)
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {err.message}")
    full = copy.deepcopy(DEFAULTS[command])
    full.update(copy.deepcopy(doc))
    full["command"] = command
    if command == "edit":
        values = dict(SHAPES_ATTRIBUTES)
        for i, e in enumerate(full["edits"]):
            if e["target"] not in values[e["attribute"]]:
                raise ConfigError(f"edits/{i}/target: {e['target']!r} is not a value of {e['attribute']!r}")
    if command == "sweep":
        base_cmd = full["base"].get("command")
        if base_cmd is None or base_cmd == "sweep":
            raise ConfigError("base: a sweep needs a base config naming a non-sweep command")
        for key in full["grid"]:
            if key not in SCHEMAS[base_cmd]["properties"]:
                raise ConfigError(f"grid: {key!r} is not a parameter of {base_cmd!r}")
        full["base"] = validate(base_cmd, full["base"])
    return full


def config_hash(cfg: dict) -> str:
    """sha256 over the canonical JSON of the validated (defaults filled) config."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def load(path, command: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate(command, doc)
