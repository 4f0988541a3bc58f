import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cases import build_case, layer_cases
from erpcond import autodiff as ad
from erpcond.autodiff import BatchNorm, Conv2d, Dense, Graph, Optimizer, backward, forward, grad_check
from erpcond.errors import ConfigurationError, InternalError, NumericError


def test_identity_graph_passes_input_through():
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    tr = forward(Graph([], (3,)), x)
    np.testing.assert_array_equal(tr.activations[-1], x)


def test_dense_matches_hand_matrix_product(rng):
    g = Graph([Dense("d", 4, 3)], (4,)).initialize(rng)
    g.params["d.bias"][:] = 0
    x = rng.standard_normal((5, 4)).astype(np.float32)
    W = g.params["d.weight"]
    expected = np.array([[sum(x[n, i] * W[i, j] for i in range(4)) for j in range(3)] for n in range(5)])
    np.testing.assert_allclose(forward(g, x).activations[-1], expected, rtol=1e-6, atol=1e-6)


def test_pointwise_conv_scales_ones():
    g = Graph([Conv2d("pw", 1, 1, (1, 1))], (1, 2, 5)).initialize(np.random.default_rng(0))
    g.params["pw.weight"][:] = 2.0
    out = forward(g, np.ones((3, 1, 2, 5), dtype=np.float32)).activations[-1]
    np.testing.assert_array_equal(out, np.full((3, 1, 2, 5), 2.0, dtype=np.float32))


def test_input_shape_mismatch_names_node():
    g = Graph([Dense("head", 4, 1)], (4,)).initialize(np.random.default_rng(0))
    with pytest.raises(ConfigurationError, match="head"):
        forward(g, np.zeros((2, 5)))


def test_zero_upstream_gives_zero_gradients(rng):
    g, x = build_case("separable", 0)
    tr = forward(g, x, train=True, rng=np.random.default_rng(0))
    grads, _ = backward(g, tr, np.zeros_like(tr.activations[-1]))
    assert grads and all(not np.any(v) for v in grads.values())


def test_dense_sum_gradient_is_ones_outer_x(rng):
    g = Graph([Dense("d", 3, 2)], (3,)).initialize(rng)
    x = rng.standard_normal((4, 3)).astype(np.float32)
    tr = forward(g, x)
    grads, _ = backward(g, tr, np.ones((4, 2), dtype=np.float32))
    # L = sum_n sum_j (x_n W)_j  ->  dL/dW_ij = sum_n x_ni, dL/db_j = n
    np.testing.assert_allclose(grads["d.weight"], np.outer(x.sum(axis=0), np.ones(2)), rtol=1e-6)
    np.testing.assert_allclose(grads["d.bias"], np.full(2, 4.0))


@pytest.mark.parametrize("name", sorted(layer_cases()))
@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients_match_finite_differences(name, seed):
    g, x = build_case(name, seed)
    assert grad_check(g, x, epsilon=1e-3, seed=seed) < 1e-4


def test_linear_model_gradient_is_exact(rng):
    g = Graph([Dense("d", 5, 2)], (5,)).initialize(rng)
    assert grad_check(g, rng.standard_normal((6, 5)), epsilon=1e-3) <= 1e-6


def test_corrupted_gradient_is_detected():
    g, x = build_case("dense", 0)
    assert grad_check(g, x, corrupt={"d.weight": 2.0}) >= 0.5


def test_grad_check_rejects_bad_epsilon():
    g, x = build_case("dense", 0)
    with pytest.raises(ConfigurationError):
        grad_check(g, x, epsilon=0.5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_non_finite_loss():
    g, x = build_case("dense", 0)
    x[0, 0] = np.inf
    with pytest.raises(NumericError):
        grad_check(g, x)


def test_frozen_parameters_absent_from_gradients():
    g, x = build_case("batchnorm", 1)
    tr = forward(g, x, train=True)
    all_names = set(g.params)
    for frozen in [set(), {"c.weight"}, {"bn.gamma"}, all_names]:
        grads, _ = backward(g, tr, np.ones_like(tr.activations[-1]), frozen=frozen)
        assert set(grads) == all_names - frozen


def test_stale_activations_are_internal_error():
    g, x = build_case("dense", 0)
    tr = forward(g, x)
    with pytest.raises(InternalError):
        backward(g, tr, np.ones((len(x) + 1, 3)))


def test_eval_forward_is_bit_identical():
    g, x = build_case("squeeze_excite", 2)
    a = forward(g, x, train=False).activations[-1]
    b = forward(g, x, train=False).activations[-1]
    assert a.tobytes() == b.tobytes()


def test_batchnorm_eval_is_independent_of_batch_composition(rng):
    g = Graph([Conv2d("c", 1, 2, (1, 3)), BatchNorm("bn", 2)], (1, 2, 6)).initialize(rng)
    # populate running statistics first
    for _ in range(5):
        forward(g, rng.standard_normal((16, 1, 2, 6)).astype(np.float32), train=True)
    item = rng.standard_normal((1, 1, 2, 6)).astype(np.float32)
    pad_a = np.concatenate([item, rng.standard_normal((3, 1, 2, 6)).astype(np.float32)])
    pad_b = np.concatenate([rng.standard_normal((7, 1, 2, 6)).astype(np.float32) * 5, item])
    ya = forward(g, pad_a).activations[-1][0]
    yb = forward(g, pad_b).activations[-1][-1]
    np.testing.assert_allclose(ya, yb, atol=1e-6)


def test_batchnorm_running_stats_use_momentum(rng):
    g = Graph([BatchNorm("bn", 1)], (1, 1, 4)).initialize(rng)
    x = rng.standard_normal((10, 1, 1, 4)).astype(np.float32) + 3.0
    forward(g, x, train=True)
    np.testing.assert_allclose(g.buffers["bn.running_mean"], 0.1 * x.mean(), rtol=1e-5)


def test_float32_parameters_and_activations(rng):
    g, x = build_case("flatten", 0)
    out = forward(g, x.astype(np.float32)).activations[-1]
    assert out.dtype == np.float32
    assert all(v.dtype == np.float32 for v in g.params.values())


# --- optimizer ------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["adam", "sgd"])
def test_zero_gradients_leave_parameters_unchanged(mode):
    params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    before = params["w"].copy()
    opt = Optimizer(mode)
    for _ in range(3):
        opt.step(params, {"w": np.zeros(2, dtype=np.float32)}, 0.1)
    np.testing.assert_array_equal(params["w"], before)


def test_sgd_single_step():
    params = {"w": np.array([1.0])}
    ad.optimizer_step(params, {"w": np.array([2.0])}, None, 0.1, mode="sgd")
    assert params["w"][0] == pytest.approx(0.8)


def test_adam_converges_on_quadratic():
    params = {"w": np.array([1.0])}
    state = None
    for _ in range(100):
        params, state = ad.optimizer_step(params, {"w": 2 * params["w"]}, state, 0.1)
    assert abs(params["w"][0]) < 0.05


def test_only_parameters_with_gradients_change():
    params = {"a": np.ones(3), "b": np.ones(3)}
    Optimizer().step(params, {"a": np.full(3, 0.5)}, 0.01)
    assert np.all(params["a"] != 1) and np.all(params["b"] == 1)


def test_nan_gradient_aborts_with_name():
    with pytest.raises(NumericError, match="conv.weight"):
        Optimizer().step({"conv.weight": np.ones(2)}, {"conv.weight": np.array([np.nan, 0.0])}, 0.1)


def test_optimizer_rejects_non_positive_lr():
    with pytest.raises(ConfigurationError):
        Optimizer().step({"w": np.ones(1)}, {"w": np.ones(1)}, 0.0)


def test_optimizer_is_deterministic():
    def run():
        p = {"w": np.linspace(-1, 1, 5)}
        opt = Optimizer()
        for i in range(10):
            opt.step(p, {"w": np.sin(p["w"] * (i + 1))}, 0.05)
        return p["w"]
    assert run().tobytes() == run().tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_dense_gradient_property(n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    g = Graph([Dense("d", n_in, n_out)], (n_in,)).initialize(rng)
    assert grad_check(g, rng.standard_normal((3, n_in)), seed=seed) < 1e-6
