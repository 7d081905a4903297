import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from andt import numerics as nx
from andt.exceptions import ConfigError, DegenerateBatchError, DimensionError, GradCheckAborted
from oracles import conv2d_loops, single_head_attention


# -- matmul ------------------------------------------------------------------

def test_matmul_examples():
    m = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(nx.matmul(np.eye(2), m), m)
    np.testing.assert_array_equal(nx.matmul(np.array([[1.0, 2]]), np.array([[3.0], [4]])), [[11.0]])
    np.testing.assert_array_equal(nx.matmul(m, np.zeros((2, 3))), np.zeros((2, 3)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = np.ones(3), np.zeros(3)
    np.testing.assert_array_equal(nx.layer_norm(np.full(3, 7.0), one, zero), zero)
    out = nx.layer_norm(np.array([1.0, 2, 3]), one, zero, eps=0.0)
    np.testing.assert_allclose(out, [-1.2247449, 0.0, 1.2247449], atol=1e-7)
    beta = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(nx.layer_norm(np.random.default_rng(1).normal(size=(4, 3)), zero, beta),
                                  np.broadcast_to(beta, (4, 3)))


def test_layer_norm_dimension_error():
    with pytest.raises(DimensionError):
        nx.layer_norm(np.ones((2, 4)), np.ones(3), np.zeros(3))


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_moments(seed):
    x = np.random.default_rng(seed).normal(3.0, 5.0, size=(6, 17))
    y = nx.layer_norm(x, np.ones(17), np.zeros(17), eps=0.0)
    assert np.abs(y.mean(axis=-1)).max() < 1e-10
    assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-6


# -- softmax -----------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    np.testing.assert_allclose(nx.softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75], rtol=1e-12)
    out = nx.softmax(np.array([1000.0, 1000.0]))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(values, shift):
    x = np.array(values)
    y = nx.softmax(x)
    assert abs(y.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(nx.softmax(x + shift), y, atol=1e-12)


# -- attention -----------------------------------------------------------------

def test_mha_single_token_is_value_projection(rng):
    z = rng.normal(size=(1, 4))
    wq, wk, wv, wo = (rng.normal(size=(4, 4)) for _ in range(4))
    np.testing.assert_allclose(nx.multi_head_attention(z, wq, wk, wv, wo, 2), (z @ wv) @ wo, rtol=1e-12)


def test_mha_identical_tokens_identical_rows(rng):
    z = np.repeat(rng.normal(size=(1, 6)), 2, axis=0)
    ws = [rng.normal(size=(6, 6)) for _ in range(4)]
    out = nx.multi_head_attention(z, *ws, heads=3)
    np.testing.assert_array_equal(out[0], out[1])


def test_mha_hand_computed_fixture():
    # K=2, one head, Wq=Wk=I: logits are I/sqrt(2); rows softmax to (p, 1-p),
    # p = e^(1/sqrt 2) / (e^(1/sqrt 2) + 1) = 0.66976...
    z = np.eye(2)
    wv = np.array([[1.0, 2.0], [3.0, 4.0]])
    wo = np.array([[1.0, 0.0], [1.0, 1.0]])
    out = nx.multi_head_attention(z, np.eye(2), np.eye(2), wv, wo, 1)
    expected = np.array([[4.3209538026933725, 2.6604769013466862],
                         [5.6790461973066275, 3.3395230986533138]])
    np.testing.assert_allclose(out, expected, rtol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_mha_one_head_matches_loop_oracle_and_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(5, 4))
    ws = [rng.normal(size=(4, 4)) for _ in range(4)]
    out, cache = nx.mha_forward(z, *ws, 1)
    np.testing.assert_allclose(out, single_head_attention(z, *ws), rtol=1e-10, atol=1e-12)
    att = cache[4]
    assert np.abs(att.sum(axis=-1) - 1.0).max() < 1e-9


def test_mha_heads_must_divide_width():
    w = np.eye(6)
    with pytest.raises(ConfigError):
        nx.multi_head_attention(np.ones((2, 6)), w, w, w, w, 4)


# -- conv / upsample -----------------------------------------------------------

def test_conv2d_examples(rng):
    x = rng.normal(size=(1, 5, 5))
    np.testing.assert_array_equal(nx.conv2d(x, np.ones((1, 1, 1, 1))), x)
    np.testing.assert_array_equal(nx.conv2d(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3))), np.full((1, 3, 3), 9.0))
    np.testing.assert_array_equal(nx.conv2d(x, np.zeros((2, 1, 3, 3)), padding=1), np.zeros((2, 5, 5)))


def test_conv2d_non_integral_extent():
    with pytest.raises(DimensionError):
        nx.conv2d(np.ones((1, 6, 6)), np.ones((1, 1, 3, 3)), stride=2)
    with pytest.raises(DimensionError):
        nx.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("stride,padding,ksize", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv2d_matches_loop_oracle_exactly_on_integers(stride, padding, ksize):
    rng = np.random.default_rng(stride * 10 + padding + ksize)
    x = rng.integers(-5, 6, size=(3, 7, 7)).astype(float)
    k = rng.integers(-3, 4, size=(2, 3, ksize, ksize)).astype(float)
    np.testing.assert_array_equal(nx.conv2d(x, k, stride, padding), conv2d_loops(x, k, stride, padding))


def test_upsample_examples(rng):
    np.testing.assert_array_equal(nx.upsample_nn_2x(np.full((1, 1, 1), 5.0)), np.full((1, 2, 2), 5.0))
    out = nx.upsample_nn_2x(np.array([[[1.0, 2], [3, 4]]]))
    expected = np.array([[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]], dtype=float)
    np.testing.assert_array_equal(out, expected)
    x = np.random.default_rng(0).normal(size=(3, 5, 4))
    np.testing.assert_allclose(nx.upsample_nn_2x(x).sum(), 4 * x.sum(), rtol=1e-12)


# -- batch norm ----------------------------------------------------------------

def test_batch_norm_examples(rng):
    c = 2
    g, b = np.ones(c), np.zeros(c)
    rm, rv = np.zeros(c), np.ones(c)
    out, _ = nx.batch_norm(np.full((3, c, 2, 2), 4.0), g, b, rm, rv, training=True)
    np.testing.assert_array_equal(out, 0.0)
    x = rng.normal(size=(3, c, 2, 2))
    out, stats = nx.batch_norm(x, g, b, rm, rv, training=False, eps=0.0)
    np.testing.assert_array_equal(out, x)
    assert stats[0] is rm


def test_batch_norm_train_then_infer_momentum_one(rng):
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    g, b = rng.normal(size=3), rng.normal(size=3)
    train_out, (rm, rv) = nx.batch_norm(x, g, b, np.zeros(3), np.ones(3), training=True, momentum=1.0)
    infer_out, _ = nx.batch_norm(x, g, b, rm, rv, training=False)
    np.testing.assert_array_equal(train_out, infer_out)


def test_batch_norm_degenerate_batch():
    with pytest.raises(DegenerateBatchError):
        nx.batch_norm(np.ones((1, 2, 1, 1)), np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), training=True)


# -- finite-difference checker ---------------------------------------------------

def test_gradcheck_linear_map_is_exact(rng):
    op, _ = nx.OP_REGISTRY["matmul"]
    rep = nx.finite_diff_check(op, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
    assert rep.passed and rep.max_rel_error < 1e-9


def test_gradcheck_layer_norm_8_vector(rng):
    op, _ = nx.OP_REGISTRY["layer_norm"]
    rep = nx.finite_diff_check(op, [rng.normal(size=8), np.ones(8), np.zeros(8)], tolerance=1e-4)
    assert rep.passed


def test_gradcheck_flags_corrupted_backward(rng):
    def bad_backward(dout, cache):
        return tuple(2.0 * g for g in nx.layer_norm_backward(dout, cache))

    op = nx.DifferentiableOp("bad_ln", nx.layer_norm_forward, bad_backward)
    rep = nx.finite_diff_check(op, [rng.normal(size=8), np.ones(8), np.zeros(8)])
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(1.0, abs=1e-6)


def test_gradcheck_aborts_on_non_finite():
    def fwd(x):
        with np.errstate(divide="ignore"):
            return np.log(x), (x,)

    def bwd(dout, cache):
        return (dout / cache[0],)

    with pytest.raises(GradCheckAborted):
        nx.finite_diff_check(nx.DifferentiableOp("log", fwd, bwd), [np.array([1.0, 0.0])])


def test_gradcheck_report_pass_flag_matches_tolerance(rng):
    op, _ = nx.OP_REGISTRY["softmax"]
    rep = nx.finite_diff_check(op, [rng.normal(size=(3, 4))], tolerance=1e-14)
    assert rep.passed == (rep.max_rel_error <= 1e-14)


@pytest.mark.parametrize("name", sorted(nx.OP_REGISTRY))
def test_every_registered_op_passes_over_ten_seeds(name):
    op, make = nx.OP_REGISTRY[name]
    for seed in range(10):
        wrapped, arrays = nx._float_inputs(op, make(np.random.default_rng(seed)))
        rep = nx.finite_diff_check(wrapped, arrays, tolerance=1e-4, seed=seed)
        assert rep.passed, f"{name} seed {seed}: {rep}"


def test_kernels_are_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    k = rng.normal(size=(4, 3, 3, 3))
    a = nx.conv2d(x, k, 1, 1)
    b = nx.conv2d(x.copy(), k.copy(), 1, 1)
    assert a.tobytes() == b.tobytes()
