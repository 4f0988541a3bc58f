import itertools
import json

import numpy as np
import pytest
from scipy import stats

from erpcond import synth
from erpcond.errors import ConfigurationError


def _profile(**kw):
    base = dict(subject_id="P01", erp_latency=0.3, erp_amplitude=6.0,
                spatial_weights=np.ones(8), noise_scale=2.0, drift_per_session=1.0)
    base.update(kw)
    return synth.SubjectProfile(**base)


def _peak_window(rec, latency):
    c, w = int(round(latency * rec.sfreq)), int(round(0.05 * rec.sfreq))
    return np.array([rec.data[:, s + c - w:s + c + w + 1].mean() for s in rec.event_samples])


def test_session_label_counts():
    rec = synth.generate_session(_profile(), 0, 42)
    assert len(rec.event_labels) == 600
    assert int(rec.event_labels.sum()) == 60 and int((rec.event_labels == 0).sum()) == 540
    assert rec.sfreq == 250.0 and rec.n_channels == 8


def test_session_is_deterministic():
    a = synth.generate_session(_profile(), 1, 42)
    b = synth.generate_session(_profile(), 1, 42)
    assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(a.event_samples, b.event_samples)
    c = synth.generate_session(_profile(), 1, 43)
    assert a.data.tobytes() != c.data.tobytes()


def test_zero_amplitude_targets_are_indistinguishable():
    rec = synth.generate_session(_profile(erp_amplitude=0.0), 0, 5)
    score = _peak_window(rec, 0.3)
    p = stats.ttest_ind(score[rec.event_labels == 1], score[rec.event_labels == 0]).pvalue
    assert p > 0.01


def test_targets_carry_deflection():
    rec = synth.generate_session(_profile(), 0, 5)
    score = _peak_window(rec, 0.3)
    assert score[rec.event_labels == 1].mean() > score[rec.event_labels == 0].mean() + 1.0


def test_cohort_arithmetic():
    c = synth.generate_cohort(10, 2, 7, 0.4)
    assert len(c.recordings) == 20 and len(c.profiles) == 10
    assert sum(len(r.event_samples) for r in c.recordings) == 12000
    for r in c.recordings:
        assert (r.event_labels == 0).sum() == 9 * (r.event_labels == 1).sum()


def test_cohort_needs_two_subjects():
    with pytest.raises(ConfigurationError):
        synth.generate_cohort(1, 2, 0)


def test_noise_free_cohort_is_separable_by_threshold():
    c = synth.generate_cohort(4, 2, 3, 0.0)
    assert synth.threshold_oracle(c.recordings, c.profiles) > 0.95


def test_orthogonal_patterns_give_uncorrelated_topographies():
    w1 = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=float)
    w2 = np.array([1, -1, 1, -1, 0, 0, 0, 0], dtype=float)
    assert w1 @ w2 == 0
    topo = []
    for i, w in enumerate((w1, w2)):
        rec = synth.generate_session(_profile(subject_id=f"P0{i}", spatial_weights=w), 0, 100 + i)
        c, h = int(0.3 * rec.sfreq), int(0.05 * rec.sfreq)
        seg = np.stack([rec.data[:, s + c - h:s + c + h + 1] for s in rec.event_samples[rec.event_labels == 1]])
        topo.append(seg.mean(axis=(0, 2)))
    assert abs(np.corrcoef(*topo)[0, 1]) < 0.2


def test_profiles_satisfy_invariants():
    profiles, _ = synth.draw_profiles(30, 11, 0.4)
    for p in profiles:
        assert 0.2 <= p.erp_latency <= 0.5 and p.erp_amplitude > 0
        assert np.sum(p.spatial_weights ** 2) == pytest.approx(1.0, abs=1e-12)


def test_default_subjects_are_separable():
    profiles, _ = synth.draw_profiles(10, 7, 0.4)
    cos = [abs(a.spatial_weights @ b.spatial_weights) for a, b in itertools.combinations(profiles, 2)]
    assert np.mean(np.array(cos) < 0.95) >= 0.9


@pytest.mark.parametrize("bad", [dict(erp_latency=0.1), dict(erp_latency=0.6),
                                 dict(spatial_weights=np.zeros(8)), dict(erp_amplitude=-1.0)])
def test_profile_validation(bad):
    with pytest.raises(ConfigurationError):
        _profile(**bad)


def test_session_drift_scales_amplitude():
    p = _profile(noise_scale=0.0, drift_per_session=0.5)
    a = synth.generate_session(p, 0, 1)
    b = synth.generate_session(p, 2, 1)
    assert np.abs(b.data).max() == pytest.approx(0.25 * np.abs(a.data).max(), rel=1e-9)


def test_write_and_read_cohort(tmp_path):
    c = synth.generate_cohort(2, 2, 9, 0.4)
    synth.write_cohort(tmp_path, c, {"seed": 9})
    recs = synth.read_dataset(tmp_path)
    assert [(r.subject_id, r.session_id) for r in recs] == [("P01", "S1"), ("P01", "S2"),
                                                             ("P02", "S1"), ("P02", "S2")]
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["params"] == {"seed": 9}
    back = synth.read_truth(tmp_path)
    np.testing.assert_allclose(back[0].spatial_weights, c.profiles[0].spatial_weights)
