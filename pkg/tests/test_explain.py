import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from erpcond import explain as X
from erpcond import models as M
from erpcond.conditioning import EmbeddingTable
from erpcond.errors import ConfigurationError, DataError, UnsupportedError

SF = 125.0


def spatial(model):
    return model.extractor.params[f"{M.SPATIAL_LAYER}.weight"]


# --- channel importance ------------------------------------------------------------

def test_one_hot_channel():
    m = M.build(M.ArchitectureConfig("eegnet"), seed=0)
    w = spatial(m)
    w[:] = 0
    w[:, :, 3, :] = 0.7
    np.testing.assert_array_equal(X.channel_importance(m).scores, np.eye(8)[3])


def test_identical_energy_is_uniform():
    m = M.build(M.ArchitectureConfig("eegnet"), seed=0)
    spatial(m)[:] = 0.2
    np.testing.assert_allclose(X.channel_importance(m).scores, np.full(8, 1 / 8), atol=1e-12)


@pytest.mark.parametrize("arch", M.ARCHS)
@pytest.mark.parametrize("seed", range(3))
def test_matches_brute_force_loop(arch, seed):
    m = M.build(M.ArchitectureConfig(arch), seed=seed)
    w = spatial(m).astype(np.float64)
    n_out, n_in, n_ch, _ = w.shape
    energy = np.zeros(n_ch)
    for c in range(n_ch):
        for d in range(n_out):
            for k in range(n_in):
                energy[c] += w[d, k, c, 0] ** 2
    np.testing.assert_allclose(X.channel_importance(m).scores, energy / energy.sum(), rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_invariant_to_filter_permutation_and_sign(seed):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((6, 1, 8, 1))
    flipped = w[rng.permutation(6)] * rng.choice([-1.0, 1.0], size=w.shape)
    np.testing.assert_allclose(X.importance_from_weights(w, 2), X.importance_from_weights(flipped, 2), rtol=1e-12)


def test_unsupported_architecture():
    m = M.build(M.ArchitectureConfig("eegnet"), seed=0)
    m.extractor.layers = [l for l in m.extractor.layers if l.name != M.SPATIAL_LAYER]
    with pytest.raises(UnsupportedError):
        X.channel_importance(m)


def test_all_zero_weights_are_unsupported():
    with pytest.raises(UnsupportedError):
        X.importance_from_weights(np.zeros((2, 1, 8, 1)), 2)


# --- Morlet transform ---------------------------------------------------------------

def test_sine_probe_peaks_at_8hz():
    t = np.arange(int(4 * SF)) / SF
    tf = X.morlet_tf(np.sin(2 * np.pi * 8 * t), SF)
    interior = tf[len(t) // 8: -len(t) // 8]
    nearest = np.argmin(np.abs(X.DEFAULT_FREQS - 8))
    assert np.mean(interior.argmax(axis=1) == nearest) >= 0.9


def test_zero_signal_gives_zeros():
    assert not np.any(X.morlet_tf(np.zeros(200), SF))


def test_impulse_is_localised():
    n, t0 = 500, 250
    x = np.zeros(n)
    x[t0] = 1.0
    tf = X.morlet_tf(x, SF)
    for j, f in enumerate(X.DEFAULT_FREQS):
        sigma = X.DEFAULT_CYCLES / (2 * np.pi * f) * SF
        row = tf[:, j] ** 2
        near = np.abs(np.arange(n) - t0) <= 2 * sigma
        assert row[near].sum() >= 0.8 * row.sum()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_magnitude_is_linear_in_amplitude(seed, c):
    x = np.random.default_rng(seed).standard_normal(120)
    base = X.morlet_tf(x, SF)
    np.testing.assert_allclose(X.morlet_tf(c * x, SF), c * base, rtol=1e-6, atol=1e-12)


def test_short_signal_keeps_length():
    assert X.morlet_tf(np.ones(10), SF, [2.0, 10.0]).shape == (10, 2)


@pytest.mark.parametrize("freqs", [[62.5], [70.0], [0.0], [-1.0]])
def test_out_of_range_frequencies(freqs):
    with pytest.raises(ConfigurationError):
        X.morlet_tf(np.ones(50), SF, freqs)


def test_too_few_cycles():
    with pytest.raises(ConfigurationError):
        X.morlet_tf(np.ones(50), SF, n_cycles=2)


# --- filter responses ---------------------------------------------------------------

@pytest.fixture(scope="module")
def eegnet():
    return M.build(M.ArchitectureConfig("eegnet"), seed=0)


def test_identical_classes_give_zero_difference(eegnet, small_es):
    sub = small_es.subset(np.arange(40))
    half = sub.epochs[:20]
    es = replace(sub, epochs=np.concatenate([half, half]), labels=np.r_[np.ones(20), np.zeros(20)])
    tf = X.filter_tf_difference(eegnet, es)
    assert max(np.max(np.abs(d)) for d in tf.difference) < 1e-5


def test_label_swap_negates(eegnet, small_es):
    a = X.filter_tf_difference(eegnet, small_es)
    swapped = replace(small_es, labels=1 - small_es.labels)
    b = X.filter_tf_difference(eegnet, swapped)
    for da, db in zip(a.difference, b.difference):
        np.testing.assert_array_equal(da, -db)


def test_one_matrix_per_filter(eegnet, small_es):
    tf = X.filter_tf_difference(eegnet, small_es)
    n_filters = eegnet.extractor.params[f"{eegnet.extractor.layers[0].name}.weight"].shape[0]
    assert len(tf.difference) == n_filters
    assert tf.difference[0].shape == (eegnet.config.n_samples, len(X.DEFAULT_FREQS))


@pytest.mark.parametrize("arch", M.ARCHS)
def test_target_bump_energy_below_10hz(arch, small_es):
    tf = X.filter_tf_difference(M.build(M.ArchitectureConfig(arch), seed=1), small_es)
    energy = np.sum([d ** 2 for d in tf.difference], axis=(0, 1))
    assert energy[tf.freqs < 10].sum() / energy.sum() > 0.9


def test_single_class_is_an_error(eegnet, small_es):
    idx = np.flatnonzero(small_es.labels == 0)[:50]
    with pytest.raises(DataError):
        X.filter_tf_difference(eegnet, small_es.subset(idx))


# --- embedding projection ---------------------------------------------------------

def table(rows, mode="projection"):
    rows = np.asarray(rows, dtype=np.float32)
    return EmbeddingTable(mode, rows, [f"S{i:02d}" for i in range(len(rows))])


def test_planted_clusters_recovered(rng):
    # unit rows around two orthogonal directions; spread well under a tenth of the gap
    centre = np.eye(16)[:2]
    rows = np.concatenate([c + 0.02 * rng.standard_normal((6, 16)) for c in centre])
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    proj = X.embedding_projection(table(rows), 2, seed=0)
    np.testing.assert_array_equal(proj.clusters, np.r_[np.zeros(6), np.ones(6)])


def test_identical_rows_collapse():
    proj = X.embedding_projection(table(np.tile([0.6, 0.8], (5, 1))), 3, seed=0)
    np.testing.assert_allclose(proj.coords, 0, atol=1e-9)
    assert set(proj.clusters.tolist()) == {0}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_coordinates_are_centred(seed, n):
    rows = np.random.default_rng(seed).standard_normal((n, 6))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    proj = X.embedding_projection(table(rows), 1, seed=0)
    np.testing.assert_allclose(proj.coords.mean(axis=0), 0, atol=1e-9)
    assert proj.variance_explained.sum() <= 1 + 1e-12


def test_projection_is_seeded(rng):
    rows = rng.standard_normal((10, 8))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    a = X.embedding_projection(table(rows), 3, seed=4)
    b = X.embedding_projection(table(rows), 3, seed=4)
    np.testing.assert_array_equal(a.clusters, b.clusters)


@pytest.mark.parametrize("k", [0, 4])
def test_cluster_count_bounds(k):
    with pytest.raises(ConfigurationError):
        X.embedding_projection(table(np.eye(3)), k)


# --- exports ----------------------------------------------------------------------------

def test_tf_csv_round_trip(tmp_path, rng):
    m = rng.standard_normal((7, 3))
    freqs, times = np.array([2.0, 2.5, 3.0]), np.arange(7) / SF
    X.write_tf_csv(tmp_path / "x.csv", m, freqs, times)
    back, f2, t2 = X.read_tf_csv(tmp_path / "x.csv")
    np.testing.assert_array_equal(back, m)
    np.testing.assert_array_equal(f2, freqs)
    np.testing.assert_array_equal(t2, times)


def test_export_file_sets(tmp_path, small_es):
    cond = M.build(M.ArchitectureConfig("eegnet"), seed=0, conditioning="projection",
                   subjects=["P01", "P02", "P03"])
    tf = X.filter_tf_difference(cond, small_es)
    files = X.export(tmp_path / "c", X.channel_importance(cond), tf,
                     X.embedding_projection(cond.table, 2, 0))
    names = {p.name for p in files}
    assert names == {"channel_importance.json", "embedding_projection.json"} | \
        {f"tf_difference_{i}.csv" for i in range(len(tf.difference))}
    assert (tmp_path / "c" / "channel_importance.svg").read_text().startswith("<svg")
    scores = json.loads((tmp_path / "c" / "channel_importance.json").read_text())["scores"]
    assert sum(scores) == pytest.approx(1.0)

    plain = M.build(M.ArchitectureConfig("eegnet"), seed=0)
    files = X.export(tmp_path / "u", X.channel_importance(plain), svg=False)
    assert [p.name for p in files] == ["channel_importance.json"]
    assert sorted(p.name for p in (tmp_path / "u").iterdir()) == ["channel_importance.json"]
