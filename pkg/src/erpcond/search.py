"""Seeded hyperparameter search behind a sampler interface."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .losses import LOSS_KINDS

DEFAULT_SPACE = {
    "kernel_length": {"type": "int", "low": 8, "high": 64},
    "window_s": {"type": "choice", "values": [0.35, 0.5, 0.6]},
    "scaler": {"type": "choice", "values": ["standard", "robust"]},
    "loss": {"type": "choice", "values": list(LOSS_KINDS)},
    "lr_initial": {"type": "loguniform", "low": 1e-4, "high": 1e-2},
    "dropout_rate": {"type": "uniform", "low": 0.1, "high": 0.5},
}

ARCH_KEYS = {"kernel_length", "window_s", "dropout_rate"}
TRAIN_KEYS = {"scaler", "lr_initial", "batch_size", "optimizer", "conditioning"}
LOSS_KEYS = {"focal_gamma", "focal_alpha", "pos_weight", "undersample_ratio"}


def validate_space(space: dict) -> None:
    if not space:
        raise ConfigurationError("search space is empty")
    for name, spec in space.items():
        kind = spec.get("type")
        if name not in ARCH_KEYS | TRAIN_KEYS | LOSS_KEYS | {"loss"}:
            raise ConfigurationError(f"search space: unknown parameter {name!r}")
        if kind == "choice":
            if not spec.get("values"):
                raise ConfigurationError(f"search space {name}: choice needs values")
        elif kind in ("int", "uniform", "loguniform"):
            lo, hi = spec.get("low"), spec.get("high")
            if lo is None or hi is None or lo > hi:
                raise ConfigurationError(f"search space {name}: need low <= high")
            if kind == "loguniform" and lo <= 0:
                raise ConfigurationError(f"search space {name}: loguniform needs low > 0")
        else:
            raise ConfigurationError(f"search space {name}: unknown type {kind!r}")


class Sampler:
    """Proposes the parameters of trial ``i``; subclasses may use the history."""

    def sample(self, space: dict, trial_index: int, history: list) -> dict:
        raise NotImplementedError


class RandomSampler(Sampler):
    """Independent draws; trial i depends only on (seed, i), so budgets nest."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def sample(self, space, trial_index, history):
        rng = np.random.default_rng([self.seed, trial_index])
        out = {}
        for name in sorted(space):
            spec = space[name]
            kind = spec["type"]
            if kind == "choice":
                v = spec["values"][int(rng.integers(len(spec["values"])))]
            elif kind == "int":
                v = int(rng.integers(spec["low"], spec["high"] + 1))
            elif kind == "uniform":
                v = float(rng.uniform(spec["low"], spec["high"]))
            else:
                v = float(math.exp(rng.uniform(math.log(spec["low"]), math.log(spec["high"]))))
            out[name] = v
        return out


@dataclass
class SearchResult:
    best_params: dict
    best_value: float
    best_trial: int
    trials: list = field(default_factory=list)


def hyper_search(space: dict, budget: int, objective, seed: int = 0, sampler: Sampler | None = None) -> SearchResult:
    """Run ``budget`` trials maximising ``objective(params) -> float``."""
    if budget < 1:
        raise ConfigurationError(f"search budget must be >= 1, got {budget}")
    validate_space(space)
    sampler = sampler or RandomSampler(seed)
    trials = []
    for i in range(budget):
        params = sampler.sample(space, i, trials)
        value = float(objective(params))
        trials.append({"trial": i, "params": params, "value": value})
    best = max(trials, key=lambda t: (t["value"], -t["trial"]))
    return SearchResult(best["params"], best["value"], best["trial"], trials)


def apply_params(exp, params: dict):
    """Experiment config with search parameters substituted."""
    arch_kw = {k: v for k, v in params.items() if k in ARCH_KEYS}
    if "window_s" in arch_kw and "kernel_length" not in arch_kw:
        arch_kw["kernel_length"] = None  # default follows the new window
    arch = replace(exp.arch, **arch_kw)
    loss_kw = {k: v for k, v in params.items() if k in LOSS_KEYS}
    if "loss" in params:
        loss_kw["kind"] = params["loss"]
    loss = replace(exp.train.loss, **loss_kw)
    train = replace(exp.train, loss=loss, **{k: v for k, v in params.items() if k in TRAIN_KEYS})
    return replace(exp, arch=arch, train=train)


def write_trials_csv(path, trials: list) -> None:
    names = sorted({k for t in trials for k in t["params"]})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trial", *names, "value"])
        for t in trials:
            w.writerow([t["trial"], *[t["params"].get(n, "") for n in names], repr(t["value"])])


def load_space(path) -> dict:
    try:
        space = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"search space file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"search space {path}: invalid JSON ({e})") from None
    validate_space(space)
    return space
