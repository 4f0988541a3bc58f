import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import numeric_grad, rel_error
from erpcond import losses as L
from erpcond import metrics as Mt
from erpcond.errors import ConfigurationError, UndefinedMetricError
from erpcond.metrics import ConfusionCounts as CC


def brute_mcc(pred, y):
    tp = sum(1 for p, t in zip(pred, y) if p and t)
    tn = sum(1 for p, t in zip(pred, y) if not p and not t)
    fp = sum(1 for p, t in zip(pred, y) if p and not t)
    fn = sum(1 for p, t in zip(pred, y) if not p and t)
    d = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return 0.0 if d == 0 else (tp * tn - fp * fn) / math.sqrt(d)


def brute_auc(scores, y):
    pos = [s for s, t in zip(scores, y) if t]
    neg = [s for s, t in zip(scores, y) if not t]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def brute_bacc(pred, y):
    pos = [p for p, t in zip(pred, y) if t]
    neg = [p for p, t in zip(pred, y) if not t]
    return 0.5 * (sum(pos) / len(pos) + sum(1 - p for p in neg) / len(neg))


def bce(z, y):
    p = 1 / (1 + np.exp(-z))
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def logit(p):
    return np.log(p / (1 - p))


# --- metrics ----------------------------------------------------------------------

def test_mcc_perfect_and_degenerate():
    assert Mt.mcc(CC(tp=10, fp=0, tn=90, fn=0)) == 1.0
    assert Mt.mcc(CC(tp=10, fp=90, tn=0, fn=0)) == 0.0
    assert Mt.mcc(CC(tp=0, fp=0, tn=90, fn=10)) == 0.0


def test_mcc_hand_example():
    # (50*500 - 40*10) / sqrt(90 * 60 * 540 * 510)
    assert Mt.mcc(CC(tp=50, fp=40, tn=500, fn=10)) == pytest.approx(0.6379, abs=1e-4)


def test_mcc_empty_matrix_is_undefined():
    with pytest.raises(UndefinedMetricError):
        Mt.mcc(CC(0, 0, 0, 0))


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_mcc_symmetric_under_class_flip(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    a = Mt.mcc(CC(tp, fp, tn, fn))
    assert a == pytest.approx(Mt.mcc(CC(tn, fn, tp, fp)), abs=1e-15)
    assert -1 <= a <= 1


def test_metrics_match_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(4, 60))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # rounding creates ties
        pred = scores >= 0.5
        c = Mt.confusion(pred, y)
        assert abs(Mt.mcc(c) - brute_mcc(pred, y)) <= 1e-12
        assert abs(Mt.roc_auc(scores, y) - brute_auc(scores, y)) <= 1e-12
        assert abs(Mt.balanced_accuracy(c) - brute_bacc(pred, y)) <= 1e-12


def test_auc_examples():
    assert Mt.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert Mt.roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert Mt.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)


def test_auc_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError):
        Mt.roc_auc([0.1, 0.2], [1, 1])


def test_auc_invariant_to_monotone_transform(rng):
    s = rng.random(100)
    y = rng.integers(0, 2, 100)
    assert Mt.roc_auc(s, y) == Mt.roc_auc(np.exp(3 * s) - 7, y)


def test_balanced_accuracy_examples(rng):
    assert Mt.balanced_accuracy(CC(tp=5, fp=0, tn=5, fn=0)) == 1.0
    assert Mt.balanced_accuracy(CC(tp=60, fp=270, tn=270, fn=0)) == 0.75
    y = np.repeat([0, 1], 5000)
    coin = rng.integers(0, 2, 10000)
    assert abs(Mt.balanced_accuracy(Mt.confusion(coin, y)) - 0.5) < 0.05
    with pytest.raises(UndefinedMetricError):
        Mt.balanced_accuracy(CC(tp=0, fp=3, tn=5, fn=0))


def test_report_json_shape():
    r = Mt.report([0.9, 0.2, 0.6, 0.1], [1, 0, 0, 0], n_epochs_trained=3, seed=7)
    d = r.to_dict()
    assert set(d) == {"mcc", "balanced_accuracy", "roc_auc", "confusion", "n_epochs_trained", "seed"}
    assert d["confusion"] == {"tp": 1, "fp": 1, "tn": 2, "fn": 0}
    assert Mt.MetricsReport.from_dict(d) == r


# --- losses -----------------------------------------------------------------------

def test_bce_near_perfect_fit():
    loss, _ = L.weighted_bce(logit(np.array([0.999, 0.001])), np.array([1, 0]), 1.0)
    assert loss < 0.01


def test_bce_single_item_is_ln2():
    loss, _ = L.weighted_bce(np.array([0.0]), np.array([1]), 1.0)
    assert loss == pytest.approx(math.log(2), rel=1e-12)


def test_pos_weight_balances_gradient_on_session_mix():
    y = np.r_[np.ones(60), np.zeros(540)]
    _, g = L.weighted_bce(np.zeros(600), y, 9.0)
    assert abs(g[y == 1].sum()) == pytest.approx(abs(g[y == 0].sum()), rel=1e-12)


def test_focal_reduces_to_half_bce(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        z, y = 3 * rng.standard_normal(n), rng.integers(0, 2, n)
        f, _ = L.focal_loss(z, y, gamma=0.0, alpha=0.5)
        assert abs(f - 0.5 * bce(z, y)) < 1e-9


def test_focal_modulation_factor():
    z = np.array([logit(0.9)])
    loss, _ = L.focal_loss(z, np.array([1]), gamma=2.0, alpha=0.25)
    assert loss == pytest.approx(0.25 * 0.01 * -math.log(0.9), rel=1e-9)


def test_focal_decreases_with_gamma_on_easy_batch(rng):
    y = rng.integers(0, 2, 50)
    z = np.where(y == 1, 3.0, -3.0) + 0.3 * rng.standard_normal(50)
    values = [L.focal_loss(z, y, g, 0.25)[0] for g in np.linspace(0, 5, 11)]
    assert all(a > b for a, b in zip(values, values[1:]))


@pytest.mark.parametrize("kind", ["bce", "focal"])
@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    z, y = 2 * rng.standard_normal(12), rng.integers(0, 2, 12)
    fn = (lambda v: L.weighted_bce(v, y, 4.0)) if kind == "bce" else (lambda v: L.focal_loss(v, y, 2.0, 0.3))
    assert rel_error(fn(z)[1], numeric_grad(lambda v: fn(v)[0], z)) < 1e-5


def test_losses_are_stable_at_extreme_logits():
    for fn in (lambda z, y: L.weighted_bce(z, y, 9.0), lambda z, y: L.focal_loss(z, y)):
        loss, g = fn(np.array([-800.0, 800.0]), np.array([1, 0]))
        assert np.isfinite(loss) and np.all(np.isfinite(g))


def test_loss_config_validation():
    for bad in [dict(kind="hinge"), dict(pos_weight=0), dict(focal_gamma=-1),
                dict(focal_alpha=1.0), dict(undersample_ratio=0.5)]:
        with pytest.raises(ConfigurationError):
            L.LossConfig(**bad)


def test_undersample_examples(small_es):
    session = np.flatnonzero((small_es.subject_ids == "P01") & (small_es.session_ids == "S1"))
    es = small_es.subset(session)
    one = L.undersample(es, 1.0, seed=3)
    assert len(one) == 120 and one.labels.sum() == 60
    assert len(L.undersample(es, 9.0, seed=3)) == 600
    a = L.undersample_indices(es.labels, 2.0, 5)
    np.testing.assert_array_equal(a, L.undersample_indices(es.labels, 2.0, 5))
    assert not np.array_equal(a, L.undersample_indices(es.labels, 2.0, 6))


def test_undersample_keeps_all_when_short(caplog):
    labels = np.r_[np.ones(10), np.zeros(15)]
    idx = L.undersample_indices(labels, 3.0, 0)
    assert len(idx) == 25
    assert "keeping all" in caplog.text


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(0, 200), st.floats(1.0, 8.0), st.integers(0, 1000))
def test_undersample_keeps_targets(n_pos, n_neg, ratio, seed):
    labels = np.r_[np.ones(n_pos), np.zeros(n_neg)]
    idx = L.undersample_indices(labels, ratio, seed)
    assert labels[idx].sum() == n_pos
    assert (labels[idx] == 0).sum() == min(n_neg, round(ratio * n_pos))
    assert len(set(idx.tolist())) == len(idx)
