"""Synthetic multi-subject ERP sessions with known ground truth.

Each target event carries a Gaussian positive deflection (sigma 50 ms) at the
subject's latency, projected onto the electrodes through the subject's
spatial pattern. Background is 1/f noise plus 50 Hz line interference.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dsp import Recording, read_recording, write_recording
from .errors import ConfigurationError, DataError

SFREQ = 250.0
N_CHANNELS = 8
N_EVENTS = 600
N_TARGETS = 60
BUMP_SIGMA = 0.05
SOA = 0.7            # seconds between onsets, plus uniform jitter below
SOA_JITTER = 0.1
LEAD = 2.0           # quiet margin at both ends of a session
LINE_FREQ = 50.0
LINE_FRACTION = 0.2

# cohort distributions
NOISE_PER_DIFFICULTY = 5.0     # microvolts of background per unit difficulty
AMPLITUDE_RANGE = (4.0, 8.0)
LATENCY_RANGE = (0.28, 0.38)
DRIFT_RANGE = (0.85, 1.15)
# parietal-heavy mean topography; subjects scatter around it
BASE_PATTERN = np.array([0.4, 0.6, 1.0, 0.8, 0.8, 0.6, 0.5, 0.5])
PATTERN_SPREAD = 0.3


@dataclass
class SubjectProfile:
    subject_id: str
    erp_latency: float
    erp_amplitude: float
    spatial_weights: np.ndarray
    noise_scale: float
    drift_per_session: float = 1.0

    def __post_init__(self):
        w = np.asarray(self.spatial_weights, dtype=np.float64)
        norm = np.linalg.norm(w)
        if norm == 0:
            raise ConfigurationError(f"{self.subject_id}: spatial weights are all zero")
        self.spatial_weights = w / norm
        if not 0.2 <= self.erp_latency <= 0.5:
            raise ConfigurationError(f"{self.subject_id}: latency {self.erp_latency} outside [0.2, 0.5] s")
        if self.erp_amplitude < 0 or self.noise_scale < 0:
            raise ConfigurationError(f"{self.subject_id}: amplitude and noise must be non-negative")

    def to_dict(self):
        d = asdict(self)
        d["spatial_weights"] = self.spatial_weights.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def pink_noise(rng: np.random.Generator, n_channels: int, n_samples: int, sfreq: float) -> np.ndarray:
    """1/f-power noise by spectral shaping of white noise; unit std per channel."""
    white = rng.standard_normal((n_channels, n_samples))
    spec = np.fft.rfft(white, axis=1)
    f = np.fft.rfftfreq(n_samples, 1 / sfreq)
    spec *= 1.0 / np.sqrt(np.maximum(f, 0.5))
    x = np.fft.irfft(spec, n=n_samples, axis=1)
    x -= x.mean(axis=1, keepdims=True)
    return x / x.std(axis=1, keepdims=True)


def generate_session(profile: SubjectProfile, session_idx: int, seed: int) -> Recording:
    rng = np.random.default_rng([int(seed), int(session_idx)])
    labels = np.zeros(N_EVENTS, dtype=np.int8)
    labels[:N_TARGETS] = 1
    labels = rng.permutation(labels)
    gaps = SOA + rng.uniform(0, SOA_JITTER, N_EVENTS)
    onsets_s = LEAD + np.concatenate([[0.0], np.cumsum(gaps[:-1])])
    onsets = np.round(onsets_s * SFREQ).astype(np.int64)
    n_samples = int(onsets[-1] + (SOA + LEAD) * SFREQ)

    data = profile.noise_scale * pink_noise(rng, N_CHANNELS, n_samples, SFREQ)
    t = np.arange(n_samples) / SFREQ
    phases = rng.uniform(0, 2 * np.pi, N_CHANNELS)
    data += LINE_FRACTION * profile.noise_scale * np.sin(2 * np.pi * LINE_FREQ * t[None, :] + phases[:, None])

    amp = profile.erp_amplitude * profile.drift_per_session ** session_idx
    half = int(np.ceil(4 * BUMP_SIGMA * SFREQ))
    centre = int(round(profile.erp_latency * SFREQ))
    k = np.arange(-half, half + 1)
    bump = amp * np.exp(-0.5 * (k / (BUMP_SIGMA * SFREQ)) ** 2)
    for onset in onsets[labels == 1]:
        seg = slice(onset + centre - half, onset + centre + half + 1)
        data[:, seg] += profile.spatial_weights[:, None] * bump[None, :]

    return Recording(
        data=data,
        sfreq=SFREQ,
        event_samples=onsets,
        event_labels=labels,
        subject_id=profile.subject_id,
        session_id=f"S{session_idx + 1}",
    )


@dataclass
class Cohort:
    recordings: list[Recording]
    profiles: list[SubjectProfile]
    seeds: dict[str, int]


def draw_profiles(n_subjects: int, master_seed: int, difficulty: float) -> tuple[list[SubjectProfile], dict]:
    if n_subjects < 2:
        raise ConfigurationError(f"a cohort needs at least 2 subjects, got {n_subjects}")
    if difficulty < 0:
        raise ConfigurationError(f"difficulty must be >= 0, got {difficulty}")
    ss = np.random.SeedSequence(master_seed)
    profile_rng = np.random.default_rng(ss.spawn(1)[0])
    session_seeds = ss.generate_state(n_subjects)
    profiles, seeds = [], {}
    for i in range(n_subjects):
        sid = f"P{i + 1:02d}"
        pattern = BASE_PATTERN + PATTERN_SPREAD * profile_rng.standard_normal(N_CHANNELS)
        profiles.append(SubjectProfile(
            subject_id=sid,
            erp_latency=float(profile_rng.uniform(*LATENCY_RANGE)),
            erp_amplitude=float(profile_rng.uniform(*AMPLITUDE_RANGE)),
            spatial_weights=pattern,
            noise_scale=float(NOISE_PER_DIFFICULTY * difficulty * profile_rng.uniform(0.8, 1.2)),
            drift_per_session=float(profile_rng.uniform(*DRIFT_RANGE)),
        ))
        seeds[sid] = int(session_seeds[i])
    return profiles, seeds


def generate_cohort(n_subjects: int, sessions_per_subject: int, master_seed: int,
                    difficulty: float = 0.4) -> Cohort:
    profiles, seeds = draw_profiles(n_subjects, master_seed, difficulty)
    recs = [
        generate_session(p, s, seeds[p.subject_id])
        for p in profiles
        for s in range(sessions_per_subject)
    ]
    return Cohort(recs, profiles, seeds)


def write_cohort(directory, cohort: Cohort, params: dict | None = None) -> None:
    d = Path(directory)
    for rec in cohort.recordings:
        write_recording(d / rec.subject_id / rec.session_id, rec)
    truth = {
        "params": params or {},
        "profiles": [p.to_dict() for p in cohort.profiles],
        "session_seeds": cohort.seeds,
    }
    (d / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))


def read_dataset(directory) -> list[Recording]:
    """All ``<subject>/<session>/`` raw recordings under a dataset directory."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"dataset directory not found: {d}")
    recs = [read_recording(m.parent) for m in sorted(d.glob("*/*/meta.json"))]
    if not recs:
        raise DataError(f"{d}: no recordings found")
    return recs


def read_truth(directory) -> list[SubjectProfile]:
    truth = json.loads((Path(directory) / "truth.json").read_text())
    return [SubjectProfile.from_dict(p) for p in truth["profiles"]]


def peak_scores(rec: Recording, profile: SubjectProfile) -> np.ndarray:
    """Ground-truth matched score per event: spatially projected mean around the peak."""
    c = int(round(profile.erp_latency * rec.sfreq))
    w = int(round(BUMP_SIGMA * rec.sfreq))
    base = int(round(0.1 * rec.sfreq))
    out = np.empty(len(rec.event_samples))
    for i, s in enumerate(rec.event_samples):
        seg = rec.data[:, s + c - w:s + c + w + 1].mean(axis=1)
        ref = rec.data[:, max(s - base, 0):s + 1].mean(axis=1)
        out[i] = profile.spatial_weights @ (seg - ref)
    return out


def threshold_oracle(recs: list[Recording], profiles: list[SubjectProfile]) -> float:
    """MCC of a midpoint threshold on :func:`peak_scores`, pooled over recordings.

    This is the reference ceiling-ish baseline: it knows each subject's true
    latency and topography.
    """
    from .metrics import confusion, mcc

    by_id = {p.subject_id: p for p in profiles}
    preds, labels = [], []
    for rec in recs:
        sc = peak_scores(rec, by_id[rec.subject_id])
        lab = rec.event_labels
        thr = 0.5 * (sc[lab == 1].mean() + sc[lab == 0].mean())
        preds.append(sc > thr)
        labels.append(lab)
    return mcc(confusion(np.concatenate(preds), np.concatenate(labels)))
