"""Experiment config files: JSON, schema-validated, with dotted flag overrides."""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigurationError
from .protocol import ExperimentConfig

SCHEMA_VERSION = 1


def schema() -> dict:
    return json.loads(resources.files("erpcond").joinpath("config_schema.json").read_text())


def _field_path(err: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in err.absolute_path) or "<root>"


def validate(doc: dict) -> None:
    v = jsonschema.Draft7Validator(schema())
    errors = sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigurationError(f"config field {_field_path(e)}: {e.message}")


def set_dotted(doc: dict, key: str, value) -> None:
    parts = key.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``train.lr_initial=0.002`` -> ("train.lr_initial", 0.002); values parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_document(path, overrides=()) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config {path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be an object")
    doc = copy.deepcopy(doc)
    for o in overrides:
        set_dotted(doc, *parse_override(o))
    validate(doc)
    return doc


def to_experiment(doc: dict) -> ExperimentConfig:
    body = {k: v for k, v in doc.items() if k not in ("schema_version", "plan_seed")}
    return ExperimentConfig.from_dict(body)


def load_config(path, overrides=()) -> tuple[ExperimentConfig, dict]:
    doc = load_document(path, overrides)
    return to_experiment(doc), doc


def dump_config(exp: ExperimentConfig, plan_seed: int = 0) -> dict:
    d = exp.to_dict()
    d["arch"].pop("feature_dim", None)
    d["schema_version"] = SCHEMA_VERSION
    d["plan_seed"] = plan_seed
    return d
