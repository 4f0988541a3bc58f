"""Class-imbalance objectives evaluated on logits, plus NT under-sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

log = logging.getLogger(__name__)

P_CLAMP = 1e-7
LOSS_KINDS = ("weighted_bce", "weighted_bce_undersample", "focal")


@dataclass
class LossConfig:
    kind: str = "focal"
    pos_weight: float | None = None     # None: NT/T ratio of the training fold
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    undersample_ratio: float = 3.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ConfigurationError("pos_weight must be positive")
        if self.focal_gamma < 0:
            raise ConfigurationError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ConfigurationError("focal_alpha must lie in (0, 1)")
        if self.undersample_ratio < 1:
            raise ConfigurationError("undersample_ratio must be >= 1")


def _log_sigmoid(z):
    # log(sigmoid(z)) = -softplus(-z), floored at log of the clamp
    return np.maximum(-np.logaddexp(0.0, -z), np.log(P_CLAMP))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def weighted_bce(logits, labels, pos_weight: float = 1.0):
    """Mean of -[w y log p + (1-y) log(1-p)] and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    loss = -(pos_weight * y * _log_sigmoid(z) + (1 - y) * _log_sigmoid(-z))
    p = _sigmoid(z)
    grad = pos_weight * y * (p - 1) + (1 - y) * p
    return float(loss.mean()), grad / len(z)


def focal_loss(logits, labels, gamma: float = 2.0, alpha: float = 0.25):
    """Mean of -alpha_t (1-p_t)^gamma log p_t and its logit gradient."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    sign = 2 * y - 1
    log_pt = _log_sigmoid(sign * z)
    pt = _sigmoid(sign * z)
    alpha_t = np.where(y > 0.5, alpha, 1 - alpha)
    mod = (1 - pt) ** gamma
    loss = -alpha_t * mod * log_pt
    # d/dz: sign * alpha_t * [gamma pt (1-pt)^gamma log pt - (1-pt)^(gamma+1)]
    grad = sign * alpha_t * (gamma * pt * mod * log_pt - (1 - pt) * mod)
    return float(loss.mean()), grad / len(z)


def make_loss(cfg: LossConfig, pos_weight: float):
    """Bind a LossConfig to a callable ``(logits, labels) -> (loss, grad)``."""
    if cfg.kind == "focal":
        return lambda z, y: focal_loss(z, y, cfg.focal_gamma, cfg.focal_alpha)
    return lambda z, y: weighted_bce(z, y, pos_weight)


def undersample_indices(labels, ratio: float, seed: int) -> np.ndarray:
    """Keep every target, draw ``ratio`` x n_targets non-targets without replacement."""
    if ratio < 1:
        raise ConfigurationError(f"undersample ratio must be >= 1, got {ratio}")
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    want = int(round(ratio * len(pos)))
    if want > len(neg):
        log.warning("asked for %d non-targets, only %d available; keeping all", want, len(neg))
        want = len(neg)
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(neg, size=want, replace=False)) if want < len(neg) else neg
    return np.sort(np.concatenate([pos, chosen]))


def undersample(es, ratio: float, seed: int):
    return es.subset(undersample_indices(es.labels, ratio, seed))
