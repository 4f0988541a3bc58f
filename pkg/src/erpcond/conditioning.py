"""Subject embedding table and the two conditioning mechanisms.

* projection: ``h_tilde = (h . e) h`` with ``||e|| = 1``
* film: ``h_tilde = gamma * h + beta`` where ``e = [gamma | beta]`` and each
  half has unit norm

The table stores free raw rows; forward passes consume the normalised view
and gradients flow back through the normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, UnknownSubjectError

MODES = ("projection", "film")


def _unit(v, axis=-1):
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise ConfigurationError("cannot normalise a zero embedding row")
    return v / n, n


@dataclass
class EmbeddingTable:
    mode: str
    rows: np.ndarray                  # N x d (projection) or N x 2d (film)
    subjects: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown conditioning mode {self.mode!r}")
        self.rows = np.asarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or len(self.rows) != len(self.subjects):
            raise ConfigurationError("embedding rows and subject list disagree")
        if len(set(self.subjects)) != len(self.subjects):
            raise ConfigurationError("duplicate subject ids in embedding table")
        if self.mode == "film" and self.rows.shape[1] % 2:
            raise ConfigurationError("film embedding length must be even")
        self.index = {s: i for i, s in enumerate(self.subjects)}

    @property
    def feature_dim(self) -> int:
        return self.rows.shape[1] // (2 if self.mode == "film" else 1)

    @classmethod
    def create(cls, mode: str, subjects, feature_dim: int, seed: int) -> "EmbeddingTable":
        width = 2 * feature_dim if mode == "film" else feature_dim
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((len(subjects), width))
        return normalize_table(cls(mode, raw, list(subjects)))

    def rows_for(self, subject_ids) -> np.ndarray:
        return np.array([self.lookup_index(s) for s in subject_ids], dtype=np.int64)

    def lookup_index(self, subject_id) -> int:
        try:
            return self.index[subject_id]
        except KeyError:
            raise UnknownSubjectError(f"subject {subject_id!r} has no embedding row") from None

    def copy(self) -> "EmbeddingTable":
        t = EmbeddingTable(self.mode, self.rows, list(self.subjects))
        t.rows = self.rows.copy()  # keep dtype
        return t


def normalized_view(mode: str, raw: np.ndarray):
    """Unit-normalise rows (projection) or each half-row (film)."""
    if mode == "projection":
        return _unit(raw)
    d = raw.shape[-1] // 2
    g, gn = _unit(raw[..., :d])
    b, bn = _unit(raw[..., d:])
    norms = np.concatenate([np.broadcast_to(gn, g.shape), np.broadcast_to(bn, b.shape)], axis=-1)
    return np.concatenate([g, b], axis=-1), norms


def normalize_table(t: EmbeddingTable, rows=None) -> EmbeddingTable:
    """Re-project raw rows onto the unit sphere (in place for ``rows`` only)."""
    raw = t.rows.astype(np.float64)
    sel = slice(None) if rows is None else np.asarray(rows)
    unit, _ = normalized_view(t.mode, raw[sel])
    out = t.rows.copy()
    out[sel] = unit.astype(np.float32)
    t.rows = out
    return t


def lookup(t: EmbeddingTable, subject_id) -> np.ndarray:
    unit, _ = normalized_view(t.mode, t.rows[t.lookup_index(subject_id)].astype(np.float64))
    return unit


def add_subject(t: EmbeddingTable, subject_id, strategy: str = "mean", seed: int = 0) -> EmbeddingTable:
    """Append a row for an unseen subject; existing rows are left bit-identical."""
    if subject_id in t.index:
        raise ConfigurationError(f"subject {subject_id!r} already registered")
    if strategy == "mean":
        if not len(t.rows):
            raise ConfigurationError("mean initialisation needs at least one existing row")
        unit, _ = normalized_view(t.mode, t.rows.astype(np.float64))
        new = unit.mean(axis=0)
    elif strategy == "random":
        new = np.random.default_rng(seed).standard_normal(t.rows.shape[1])
    else:
        raise ConfigurationError(f"unknown add_subject strategy {strategy!r}")
    new, _ = normalized_view(t.mode, new)
    rows = np.concatenate([t.rows, new[None].astype(np.float32)])
    return EmbeddingTable(t.mode, rows, t.subjects + [subject_id])


# --- mechanisms ----------------------------------------------------------------

def condition_projection(h, e):
    """``(h . e) h``, row-wise for batches."""
    h = np.asarray(h)
    e = np.asarray(e)
    if h.shape != e.shape:
        raise ConfigurationError(f"feature {h.shape} and embedding {e.shape} dimensions differ")
    return np.sum(h * e, axis=-1, keepdims=True) * h


def condition_film(h, e):
    """``gamma * h + beta`` with ``e = [gamma | beta]``."""
    h = np.asarray(h)
    e = np.asarray(e)
    if e.shape[-1] % 2:
        raise ConfigurationError("film embedding has odd length")
    d = e.shape[-1] // 2
    if h.shape[-1] != d:
        raise ConfigurationError(f"feature dim {h.shape[-1]} does not match film half-width {d}")
    return e[..., :d] * h + e[..., d:]


def projection_backward(h, e, dout):
    lam = np.sum(h * e, axis=-1, keepdims=True)
    s = np.sum(dout * h, axis=-1, keepdims=True)
    return lam * dout + s * e, s * h


def film_backward(h, e, dout):
    d = h.shape[-1]
    return e[..., :d] * dout, np.concatenate([dout * h, dout], axis=-1)


def _unit_backward(unit, norm, dunit):
    # d(v/|v|)/dv applied to dunit
    return (dunit - np.sum(dunit * unit, axis=-1, keepdims=True) * unit) / norm


def conditioned_forward(mode: str, h, raw_rows):
    """Condition a batch using raw (unnormalised) embedding rows, one per item."""
    unit, norm = normalized_view(mode, raw_rows)
    fn = condition_projection if mode == "projection" else condition_film
    return fn(h, unit.astype(h.dtype)), (h, unit, norm)


def conditioned_backward(mode: str, cache, dout):
    """Gradients w.r.t. the features and the raw per-item rows."""
    h, unit, norm = cache
    if mode == "projection":
        dh, de = projection_backward(h, unit, dout)
        return dh, _unit_backward(unit, norm, de)
    dh, de = film_backward(h, unit, dout)
    d = h.shape[-1]
    draw = np.concatenate([
        _unit_backward(unit[..., :d], norm[..., :d], de[..., :d]),
        _unit_backward(unit[..., d:], norm[..., d:], de[..., d:]),
    ], axis=-1)
    return dh, draw
