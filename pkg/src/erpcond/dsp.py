"""Recording -> epoch preprocessing chain.

Fixed order: notch -> band-pass -> epoch -> resample -> scale. Each object
carries a stage tag; an operation refuses input already at or past its own
stage, which rules out double filtering.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import ConfigurationError, DataError

log = logging.getLogger(__name__)

STAGES = ("raw", "notched", "bandpassed", "epoched", "resampled", "scaled")
SCHEMA_VERSION = 1
TARGET, NONTARGET = 1, 0

NOTCH_Q = 30.0
BANDPASS_ORDER = 4


def _check_stage(obj, op_stage: str):
    if STAGES.index(obj.stage) >= STAGES.index(op_stage):
        raise ConfigurationError(
            f"cannot apply '{op_stage}' step to data already at stage '{obj.stage}'"
        )


@dataclass
class Recording:
    data: np.ndarray                 # channels x samples, microvolts
    sfreq: float
    event_samples: np.ndarray        # int sample indices
    event_labels: np.ndarray         # 1 = Target, 0 = NonTarget
    subject_id: str
    session_id: str
    stage: str = "raw"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.event_samples = np.asarray(self.event_samples, dtype=np.int64)
        self.event_labels = np.asarray(self.event_labels, dtype=np.int8)
        if self.sfreq <= 0:
            raise ConfigurationError(f"sfreq must be positive, got {self.sfreq}")
        if self.data.ndim != 2:
            raise ConfigurationError(f"recording data must be 2-D, got shape {self.data.shape}")
        if len(self.event_samples) != len(self.event_labels):
            raise DataError("event samples and labels differ in length")
        if len(self.event_samples) and (
            self.event_samples.min() < 0 or self.event_samples.max() >= self.data.shape[1]
        ):
            raise DataError(f"{self.subject_id}/{self.session_id}: event index outside recording")

    @property
    def n_channels(self):
        return self.data.shape[0]


@dataclass
class EpochSet:
    epochs: np.ndarray               # n x channels x samples, float32
    labels: np.ndarray
    subject_ids: np.ndarray
    session_ids: np.ndarray
    sfreq: float
    t0_offset: float                 # seconds from window start to stimulus onset
    stage: str = "epoched"
    event_index: np.ndarray | None = None  # temporal position within its session
    fold_id: str | None = None

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.subject_ids = np.asarray(self.subject_ids, dtype=str)
        self.session_ids = np.asarray(self.session_ids, dtype=str)
        n = len(self.epochs)
        if self.event_index is None:
            self.event_index = np.arange(n)
        self.event_index = np.asarray(self.event_index, dtype=np.int64)
        if not (len(self.labels) == len(self.subject_ids) == len(self.session_ids) == n):
            raise DataError("epoch set fields differ in length")

    def __len__(self):
        return len(self.epochs)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.epochs.shape[-1]) / self.sfreq - self.t0_offset

    def subset(self, idx, fold_id: str | None = None) -> "EpochSet":
        idx = np.asarray(idx)
        return replace(
            self,
            epochs=self.epochs[idx],
            labels=self.labels[idx],
            subject_ids=self.subject_ids[idx],
            session_ids=self.session_ids[idx],
            event_index=self.event_index[idx],
            fold_id=self.fold_id if fold_id is None else fold_id,
        )

    @staticmethod
    def concat(sets: list["EpochSet"]) -> "EpochSet":
        if not sets:
            raise DataError("nothing to concatenate")
        first = sets[0]
        for s in sets[1:]:
            if s.sfreq != first.sfreq or s.t0_offset != first.t0_offset or s.stage != first.stage:
                raise ConfigurationError("epoch sets disagree on sfreq, onset or stage")
        return EpochSet(
            epochs=np.concatenate([s.epochs for s in sets]),
            labels=np.concatenate([s.labels for s in sets]),
            subject_ids=np.concatenate([s.subject_ids for s in sets]),
            session_ids=np.concatenate([s.session_ids for s in sets]),
            sfreq=first.sfreq,
            t0_offset=first.t0_offset,
            stage=first.stage,
            event_index=np.concatenate([s.event_index for s in sets]),
        )


def _padlen(n_coef: int, n_samples: int) -> int:
    return min(3 * n_coef, n_samples - 1)


def apply_notch(rec: Recording, freqs=(50.0, 60.0), q: float = NOTCH_Q) -> Recording:
    """Zero-phase second-order IIR notch at each frequency."""
    _check_stage(rec, "notched")
    nyq = rec.sfreq / 2
    data = rec.data
    for f in freqs:
        if not 0 < f < nyq:
            raise ConfigurationError(f"notch frequency {f} Hz not below Nyquist {nyq} Hz")
        b, a = signal.iirnotch(f, q, fs=rec.sfreq)
        data = signal.filtfilt(b, a, data, axis=-1, padtype="even",
                               padlen=_padlen(max(len(a), len(b)), data.shape[-1]))
    return replace(rec, data=data, stage="notched")


def bandpass_sos(low: float, high: float, sfreq: float, order: int = BANDPASS_ORDER):
    if not 0 < low < high < sfreq / 2:
        raise ConfigurationError(f"invalid band {low}-{high} Hz for sfreq {sfreq} Hz")
    return signal.butter(order, [low, high], btype="bandpass", fs=sfreq, output="sos")


def apply_bandpass(rec: Recording, low: float = 2.0, high: float = 15.0,
                   order: int = BANDPASS_ORDER) -> Recording:
    """Zero-phase Butterworth band-pass (forward-backward)."""
    _check_stage(rec, "bandpassed")
    sos = bandpass_sos(low, high, rec.sfreq, order)
    data = signal.sosfiltfilt(sos, rec.data, axis=-1, padtype="even",
                              padlen=_padlen(2 * len(sos) + 1, rec.data.shape[-1]))
    return replace(rec, data=data, stage="bandpassed")


@dataclass
class EpochingReport:
    kept: int
    dropped: int


def epoch(rec: Recording, tmin: float = -0.1, tmax: float = 0.5,
          baseline: tuple[float, float] = (-0.1, 0.0)) -> tuple[EpochSet, EpochingReport]:
    """Cut one window per event and subtract the per-channel baseline mean.

    Windows that fall outside the recording are dropped and counted.
    """
    _check_stage(rec, "epoched")
    if not tmin < 0 <= tmax:
        raise ConfigurationError(f"need tmin < 0 <= tmax, got {tmin}, {tmax}")
    if not (tmin <= baseline[0] < baseline[1] <= tmax):
        raise ConfigurationError(f"baseline {baseline} outside window [{tmin}, {tmax}]")
    start_off = int(round(tmin * rec.sfreq))
    stop_off = int(round(tmax * rec.sfreq))
    n_samp = stop_off - start_off + 1
    times = (np.arange(n_samp) + start_off) / rec.sfreq
    base = (times >= baseline[0] - 1e-9) & (times <= baseline[1] + 1e-9)
    starts = rec.event_samples + start_off
    ok = (starts >= 0) & (starts + n_samp <= rec.data.shape[1])
    dropped = int((~ok).sum())
    if dropped:
        log.warning("%s/%s: dropped %d events whose window exceeds the recording",
                    rec.subject_id, rec.session_id, dropped)
    keep = np.flatnonzero(ok)
    if not len(keep):
        raise DataError(f"{rec.subject_id}/{rec.session_id}: no epochs survive the window bounds")
    idx = starts[keep][:, None] + np.arange(n_samp)[None, :]
    ep = rec.data[:, idx].transpose(1, 0, 2)            # n x C x S
    ep = ep - ep[:, :, base].mean(axis=2, keepdims=True)
    n = len(keep)
    es = EpochSet(
        epochs=ep.astype(np.float32),
        labels=rec.event_labels[keep],
        subject_ids=np.full(n, rec.subject_id),
        session_ids=np.full(n, rec.session_id),
        sfreq=rec.sfreq,
        t0_offset=-start_off / rec.sfreq,
        stage="epoched",
        event_index=keep,
    )
    return es, EpochingReport(kept=n, dropped=dropped)


def resample_half(es: EpochSet, order: int = 8) -> EpochSet:
    """Anti-alias low-pass at 0.8 x the new Nyquist, then keep every 2nd sample."""
    _check_stage(es, "resampled")
    sf = float(es.sfreq)
    if not sf.is_integer() or int(sf) % 2:
        raise ConfigurationError(f"resample_half needs an even integer sfreq, got {sf}")
    new_sf = sf / 2
    sos = signal.butter(order, 0.8 * new_sf / 2, btype="lowpass", fs=sf, output="sos")
    data = signal.sosfiltfilt(sos, es.epochs.astype(np.float64), axis=-1, padtype="even",
                              padlen=_padlen(2 * len(sos) + 1, es.epochs.shape[-1]))
    return replace(es, epochs=data[..., ::2].astype(np.float32), sfreq=new_sf, stage="resampled")


def crop_window(es: EpochSet, window_s: float) -> np.ndarray:
    """Post-onset samples (0 <= t <= window_s) as the model input array."""
    t = es.times
    mask = (t >= -1e-9) & (t <= window_s + 1e-9)
    return np.ascontiguousarray(es.epochs[..., mask])


def window_samples(window_s: float, sfreq: float = 125.0, tmin: float = -0.1,
                   raw_sfreq: float = 250.0) -> int:
    """Model input length produced by :func:`crop_window` for the standard chain."""
    start = int(round(tmin * raw_sfreq))
    n_raw = int(round(window_s * raw_sfreq)) - start + 1
    step = int(round(raw_sfreq / sfreq))
    t = (np.arange(math.ceil(n_raw / step)) * step + start) / raw_sfreq
    return int(((t >= -1e-9) & (t <= window_s + 1e-9)).sum())


@dataclass
class Scaler:
    kind: str
    location: np.ndarray
    scale: np.ndarray
    fold_id: str | None = None

    def to_dict(self):
        return {"kind": self.kind, "location": self.location.tolist(),
                "scale": self.scale.tolist(), "fold_id": self.fold_id}


def fit_scaler(kind: str, train: EpochSet, fold_id: str | None = None) -> Scaler:
    """Per-channel location/scale over every training sample of that channel."""
    if kind not in ("standard", "robust"):
        raise ConfigurationError(f"unknown scaler kind {kind!r}")
    x = train.epochs.transpose(1, 0, 2).reshape(train.epochs.shape[1], -1).astype(np.float64)
    if kind == "standard":
        loc = x.mean(axis=1)
        scale = x.std(axis=1)
    else:
        loc = np.median(x, axis=1)
        q75, q25 = np.percentile(x, [75, 25], axis=1)
        scale = q75 - q25
    bad = ~(scale > 1e-12)
    if bad.any():
        log.warning("channels %s have zero spread; using scale 1", np.flatnonzero(bad).tolist())
        scale = np.where(bad, 1.0, scale)
    return Scaler(kind, loc, scale, fold_id if fold_id is not None else train.fold_id)


def apply_scaler(s: Scaler, es: EpochSet) -> EpochSet:
    _check_stage(es, "scaled")
    if s.fold_id is not None and es.fold_id is not None and s.fold_id != es.fold_id:
        raise ConfigurationError(f"scaler of fold {s.fold_id} applied to data of fold {es.fold_id}")
    if len(s.scale) != es.epochs.shape[1]:
        raise ConfigurationError("scaler channel count does not match epochs")
    out = (es.epochs - s.location[None, :, None]) / s.scale[None, :, None]
    return replace(es, epochs=out.astype(np.float32), stage="scaled")


def preprocess(rec: Recording, tmax: float = 0.6, notch=(50.0, 60.0), band=(2.0, 15.0),
               tmin: float = -0.1) -> tuple[EpochSet, EpochingReport]:
    """notch -> band-pass -> epoch -> resample; scaling happens per fold."""
    r = apply_notch(rec, notch)
    r = apply_bandpass(r, *band)
    es, report = epoch(r, tmin, tmax, (tmin, 0.0))
    return resample_half(es), report


# --- on-disk container -----------------------------------------------------

def write_epochs(directory, es: EpochSet) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": "epochs",
        "shape": list(es.epochs.shape),
        "sfreq": es.sfreq,
        "t0_offset": es.t0_offset,
        "subject_ids": es.subject_ids.tolist(),
        "session_ids": es.session_ids.tolist(),
        "labels": es.labels.astype(int).tolist(),
        "event_index": es.event_index.tolist(),
        "stage": es.stage,
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    (d / "epochs.f32").write_bytes(np.ascontiguousarray(es.epochs, dtype="<f4").tobytes())


def _read_meta(d: Path) -> dict:
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{d}: missing meta.json") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{d}: meta.json is not valid JSON ({exc})") from exc
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{d}: unsupported schema version {meta.get('schema_version')}")
    return meta


def _read_block(d: Path, shape) -> np.ndarray:
    path = d / "epochs.f32"
    if not path.is_file():
        raise DataError(f"{d}: missing epochs.f32")
    arr = np.fromfile(path, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise DataError(f"{d}: epochs.f32 holds {arr.size} floats, meta declares {shape}")
    return arr.reshape(shape).astype(np.float32)


def read_epochs(directory) -> EpochSet:
    d = Path(directory)
    meta = _read_meta(d)
    if meta.get("kind") != "epochs":
        raise DataError(f"{d}: not an epoch container")
    return EpochSet(
        epochs=_read_block(d, meta["shape"]),
        labels=meta["labels"],
        subject_ids=meta["subject_ids"],
        session_ids=meta["session_ids"],
        sfreq=meta["sfreq"],
        t0_offset=meta["t0_offset"],
        stage=meta["stage"],
        event_index=meta.get("event_index"),
    )


def write_recording(directory, rec: Recording) -> None:
    """Raw layout: same files as the epoch container, 2-D block, with events."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "kind": "raw",
        "shape": list(rec.data.shape),
        "sfreq": rec.sfreq,
        "subject_id": rec.subject_id,
        "session_id": rec.session_id,
        "events": [[int(s), int(lab)] for s, lab in zip(rec.event_samples, rec.event_labels)],
        "stage": rec.stage,
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    (d / "epochs.f32").write_bytes(np.ascontiguousarray(rec.data, dtype="<f4").tobytes())


def read_recording(directory) -> Recording:
    d = Path(directory)
    meta = _read_meta(d)
    if meta.get("kind") != "raw":
        raise DataError(f"{d}: not a raw recording")
    events = np.asarray(meta["events"], dtype=np.int64).reshape(-1, 2)
    return Recording(
        data=_read_block(d, meta["shape"]).astype(np.float64),
        sfreq=meta["sfreq"],
        event_samples=events[:, 0],
        event_labels=events[:, 1],
        subject_id=meta["subject_id"],
        session_id=meta["session_id"],
        stage=meta["stage"],
    )
