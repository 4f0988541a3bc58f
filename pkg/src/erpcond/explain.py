"""Channel importance, filter time-frequency contrasts, and embedding maps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from . import autodiff as ad
from . import models as M
from .conditioning import EmbeddingTable, normalized_view
from .dsp import EpochSet, crop_window
from .errors import ConfigurationError, DataError, UnsupportedError

log = logging.getLogger(__name__)

DEFAULT_FREQS = np.arange(2.0, 15.0 + 1e-9, 0.5)
DEFAULT_CYCLES = 7.0
KMEANS_RESTARTS = 50


@dataclass
class ChannelImportance:
    scores: np.ndarray
    model_id: str = ""
    checkpoint_id: str = ""

    def to_dict(self):
        return {"scores": self.scores.tolist(), "model_id": self.model_id,
                "checkpoint_id": self.checkpoint_id,
                "definition": "sum of squared spatial-layer weights per electrode, normalised to sum 1"}


def importance_from_weights(w: np.ndarray, channel_axis: int) -> np.ndarray:
    energy = np.sum(np.moveaxis(np.asarray(w, dtype=np.float64), channel_axis, 0) ** 2,
                    axis=tuple(range(1, np.ndim(w))))
    total = energy.sum()
    if total == 0:
        raise UnsupportedError("spatial weights are all zero")
    return energy / total


def channel_importance(model: M.Model, checkpoint_id: str = "") -> ChannelImportance:
    """Weight energy per electrode of the layer that mixes electrodes."""
    try:
        layer = model.extractor.layer(M.SPATIAL_LAYER)
    except (KeyError, ConfigurationError):
        raise UnsupportedError("model has no spatial layer") from None
    w = model.extractor.params[f"{layer.name}.weight"]
    if w.ndim != 4 or w.shape[2] != model.config.n_channels:
        raise UnsupportedError(f"layer {layer.name} does not carry an electrode axis")
    # weight layout (out, in/groups, electrodes, 1)
    return ChannelImportance(importance_from_weights(w, 2), model.config.arch, checkpoint_id)


def morlet_tf(signal, sfreq: float, freqs=DEFAULT_FREQS, n_cycles: float = DEFAULT_CYCLES) -> np.ndarray:
    """Magnitude of complex Morlet convolution, shape (time, freq)."""
    x = np.asarray(signal, dtype=np.float64)
    freqs = np.asarray(freqs, dtype=np.float64)
    if x.ndim != 1:
        raise ConfigurationError("morlet_tf expects a 1-D signal")
    if n_cycles < 3:
        raise ConfigurationError(f"n_cycles must be >= 3, got {n_cycles}")
    if np.any(freqs <= 0) or np.any(freqs >= sfreq / 2):
        raise ConfigurationError(f"frequencies must lie in (0, {sfreq / 2}) Hz")
    n = len(x)
    out = np.empty((n, len(freqs)))
    for j, f in enumerate(freqs):
        sigma = n_cycles / (2 * np.pi * f)
        half = int(np.ceil(3 * sigma * sfreq))
        t = np.arange(-half, half + 1) / sfreq
        env = np.exp(-0.5 * (t / sigma) ** 2)
        wavelet = env * np.exp(2j * np.pi * f * t) / env.sum()
        pad = min(half, n - 1)
        xp = np.pad(x, (pad, pad), mode="symmetric")
        if len(xp) < len(wavelet):
            xp = np.pad(xp, ((len(wavelet) - len(xp) + 1) // 2,) * 2)
        full = np.convolve(xp, wavelet, mode="same")
        start = (len(xp) - n) // 2
        out[:, j] = np.abs(full[start:start + n])
    return out


@dataclass
class TFResponse:
    freqs: np.ndarray
    times: np.ndarray
    target: list = field(default_factory=list)        # per filter (time, freq)
    nontarget: list = field(default_factory=list)
    difference: list = field(default_factory=list)


def first_layer_activations(model: M.Model, x) -> np.ndarray:
    """Output of the first convolution, averaged over the electrode axis: (n, filters, time)."""
    layer = model.extractor.layers[0]
    params = model.extractor.local(model.extractor.params, layer)
    y, _ = layer.forward(M.as_input(x), params, {}, False, None)
    return y.mean(axis=2, dtype=np.float64)


def filter_tf_difference(model: M.Model, es: EpochSet, freqs=DEFAULT_FREQS,
                         n_cycles: float = DEFAULT_CYCLES) -> TFResponse:
    labels = np.asarray(es.labels)
    if len(set(labels.tolist())) < 2:
        raise DataError("filter_tf_difference needs both target and non-target epochs")
    x = es.epochs if es.epochs.shape[-1] == model.config.n_samples else crop_window(es, model.config.window_s)
    act = first_layer_activations(model, x)
    mean_t = act[labels == 1].mean(axis=0)
    mean_nt = act[labels == 0].mean(axis=0)
    sfreq = es.sfreq
    resp = TFResponse(np.asarray(freqs, dtype=np.float64), np.arange(act.shape[-1]) / sfreq)
    for a, b in zip(mean_t, mean_nt):
        ta, tb = morlet_tf(a, sfreq, freqs, n_cycles), morlet_tf(b, sfreq, freqs, n_cycles)
        resp.target.append(ta)
        resp.nontarget.append(tb)
        resp.difference.append(ta - tb)
    return resp


@dataclass
class EmbeddingProjection:
    coords: np.ndarray
    clusters: np.ndarray
    variance_explained: np.ndarray
    subjects: list

    def to_dict(self):
        return {"coords": self.coords.tolist(), "clusters": self.clusters.tolist(),
                "variance_explained": self.variance_explained.tolist(), "subjects": self.subjects,
                "method": "pca", "note": "PCA used in place of a non-linear embedding; k-means on the 2-D coordinates"}


def kmeans(points: np.ndarray, k: int, seed: int, restarts: int = KMEANS_RESTARTS) -> np.ndarray:
    """Best-inertia k-means labels over seeded restarts; canonical label order."""
    distinct = np.unique(np.round(points, 12), axis=0)
    if len(distinct) <= k:
        # every distinct point is its own cluster
        _, labels = np.unique(np.round(points, 12), axis=0, return_inverse=True)
        return _canonical(labels.ravel())
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(restarts):
        centres, labels = kmeans2(points, k, minit="++", seed=rng)
        inertia = float(((points - centres[labels]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels, inertia
    return _canonical(best)


def _canonical(labels):
    # relabel by order of first appearance so outputs are comparable across runs
    mapping = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels], dtype=np.int64)


def embedding_projection(t: EmbeddingTable, k: int, seed: int = 0) -> EmbeddingProjection:
    n = len(t.rows)
    if not 1 <= k <= n:
        raise ConfigurationError(f"need 1 <= k <= N ({n}), got k={k}")
    rows, _ = normalized_view(t.mode, t.rows.astype(np.float64))
    centred = rows - rows.mean(axis=0)
    u, s, vt = np.linalg.svd(centred, full_matrices=False)
    coords = np.zeros((n, 2))
    m = min(2, len(s))
    coords[:, :m] = u[:, :m] * s[:m]
    coords -= coords.mean(axis=0)
    total = float((s ** 2).sum())
    var = np.zeros(2)
    if total > 0:
        var[:m] = s[:m] ** 2 / total
    return EmbeddingProjection(coords, kmeans(coords, k, seed), var, list(t.subjects))


# --- exports -------------------------------------------------------------------

def write_tf_csv(path, matrix: np.ndarray, freqs, times) -> None:
    """Rows are frequencies; header row is the time grid."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["freq_hz\\time_s", *[repr(float(t)) for t in times]])
        for j, fr in enumerate(freqs):
            w.writerow([repr(float(fr)), *[repr(float(v)) for v in matrix[:, j]]])


def read_tf_csv(path):
    with open(path) as f:
        rows = list(csv.reader(f))
    times = np.array([float(v) for v in rows[0][1:]])
    freqs = np.array([float(r[0]) for r in rows[1:]])
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]]).T
    return mat, freqs, times


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def export(out_dir, ci: ChannelImportance, tf: TFResponse | None = None,
           proj: EmbeddingProjection | None = None, svg: bool = True) -> list[Path]:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    written = [d / "channel_importance.json"]
    _dump(written[0], ci.to_dict())
    if tf is not None:
        for i, diff in enumerate(tf.difference):
            p = d / f"tf_difference_{i}.csv"
            write_tf_csv(p, diff, tf.freqs, tf.times)
            written.append(p)
    if proj is not None:
        p = d / "embedding_projection.json"
        _dump(p, proj.to_dict())
        written.append(p)
    if svg:
        (d / "channel_importance.svg").write_text(svg_topomap(ci.scores))
        if tf is not None and tf.difference:
            (d / "tf_difference_0.svg").write_text(svg_heatmap(tf.difference[0].T))
    return written


# --- minimal SVG -----------------------------------------------------------------

# schematic 8-electrode layout on a unit head (x right, y up); not a real montage
SCHEMATIC_POSITIONS = [(-0.5, 0.55), (0.5, 0.55), (0.0, 0.3), (-0.6, 0.0),
                       (0.6, 0.0), (0.0, -0.2), (-0.4, -0.55), (0.4, -0.55)]


def _colour(v: float) -> str:
    # white -> red ramp on [0, 1]
    v = float(np.clip(v, 0, 1))
    g = int(round(255 * (1 - v)))
    return f"rgb(255,{g},{g})"


def _diverging(v: float) -> str:
    v = float(np.clip(v, -1, 1))
    if v >= 0:
        g = int(round(255 * (1 - v)))
        return f"rgb(255,{g},{g})"
    g = int(round(255 * (1 + v)))
    return f"rgb({g},{g},255)"


def svg_topomap(scores, size: int = 240) -> str:
    scores = np.asarray(scores, dtype=np.float64)
    top = scores.max() if scores.size and scores.max() > 0 else 1.0
    c = size / 2
    r = size * 0.45
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<circle cx="{c}" cy="{c}" r="{r:.1f}" fill="none" stroke="black"/>',
             f'<text x="4" y="12" font-size="10">schematic layout</text>']
    for i, v in enumerate(scores):
        x, y = SCHEMATIC_POSITIONS[i % len(SCHEMATIC_POSITIONS)]
        px, py = c + x * r, c - y * r
        parts.append(f'<circle cx="{px:.1f}" cy="{py:.1f}" r="{size * 0.06:.1f}" '
                     f'fill="{_colour(v / top)}" stroke="black"/>')
        parts.append(f'<text x="{px:.1f}" y="{py + 3:.1f}" font-size="9" text-anchor="middle">{i}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def svg_heatmap(matrix, cell: int = 6) -> str:
    """Rows of ``matrix`` drawn top to bottom with a symmetric colour scale."""
    m = np.asarray(matrix, dtype=np.float64)
    lim = np.abs(m).max() or 1.0
    h, w = m.shape
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}">']
    for i in range(h):
        for j in range(w):
            parts.append(f'<rect x="{j * cell}" y="{(h - 1 - i) * cell}" width="{cell}" '
                         f'height="{cell}" fill="{_diverging(m[i, j] / lim)}"/>')
    parts.append("</svg>")
    return "\n".join(parts)
