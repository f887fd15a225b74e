import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanfm.numcore import (
    OptimizerState,
    ShapeError,
    Tensor,
    adam_step,
    backward,
    gather,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    mse,
    no_grad,
    numerical_grad,
    softmax,
    total,
)
from chanfm.numcore import gradcheck as gc
from chanfm.numcore import tensor as T


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_mse_of_identical_args():
    x = leaf([1.0, -2.0, 3.0])
    loss = mse(x, x)
    assert float(loss.data) == 0.0
    grads = backward(loss)
    assert np.array_equal(grads[x], np.zeros(3))


def test_sum_of_scaled_input():
    x = leaf([1.0, 2.0, 3.0])
    grads = backward(total(2 * x))
    assert np.array_equal(grads[x], [2.0, 2.0, 2.0])


def test_three_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((6, 4)))
    y = Tensor(rng.standard_normal((6, 2)))
    ws = [leaf(rng.standard_normal(s)) for s in ((4, 5), (5, 3), (3, 2))]
    bs = [leaf(rng.standard_normal(s[1])) for s in ((4, 5), (5, 3), (3, 2))]

    def loss_fn():
        h = x
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = T.add(matmul(h, w), b)
            if i < 2:
                h = gelu(h)
        return mse(h, y)

    grads = backward(loss_fn())
    for p in ws + bs:
        num = numerical_grad(loss_fn, p, 1e-5)
        assert gc.relative_error(grads[p], num) < 1e-3


def test_single_matmul_passes():
    rng = np.random.default_rng(0)

    def build(rng):
        a, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal((3, 2)))
        w = Tensor(rng.standard_normal((2, 2)))
        return [a, b], lambda: total(T.mul(matmul(a, b), w))

    report = grad_check(build, n_trials=3, tol=1e-3)
    assert report.passed, report.lines()


def test_softmax_layernorm_chain_passes():
    report = grad_check({"chain": gc.DEFAULT_BUILDERS["softmax_layernorm"]}, n_trials=10, tol=1e-3)
    assert report.passed


def test_zero_tolerance_fails_everything():
    report = grad_check(n_trials=1, tol=0.0)
    assert set(report.failures) == set(gc.DEFAULT_BUILDERS)


def test_grad_check_needs_a_trial():
    with pytest.raises(ValueError):
        grad_check(n_trials=0)


def test_report_covers_every_op_kind():
    report = grad_check(n_trials=2)
    for op in ("add", "scale", "mul", "matmul", "transpose", "reshape", "gather",
               "layer_norm", "softmax", "gelu", "mse"):
        assert op in report.max_rel_error
    assert len(report.lines()) == len(report.max_rel_error)


@pytest.mark.parametrize("seed", range(0, 100, 25))
def test_randomized_graphs(seed):
    report = grad_check(n_trials=25, seed=seed)
    assert report.passed, report.lines()


# -- errors ------------------------------------------------------------------

def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        matmul(leaf(np.zeros((2, 3))), leaf(np.zeros((4, 2))))


def test_add_shape_error():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(leaf(np.zeros((2, 3))), leaf(np.zeros(4)))


def test_non_scalar_loss_rejected():
    with pytest.raises(ShapeError, match="scalar"):
        backward(leaf(np.ones(3)) * 2.0)


def test_gather_out_of_range():
    with pytest.raises(ShapeError):
        gather(leaf(np.zeros((2, 3))), [3], axis=1)


# -- properties --------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gradient_of_sum_is_sum_of_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((3, 4)))
    w = leaf(rng.standard_normal((4, 2)))
    y = Tensor(rng.standard_normal((3, 2)))
    l1 = lambda: mse(matmul(x, w), y)
    l2 = lambda: total(gelu(matmul(x, w)))
    g1 = backward(l1())
    g1 = {k: v.copy() for k, v in g1.items()}
    g2 = backward(l2())
    g2 = {k: v.copy() for k, v in g2.items()}
    g12 = backward(T.add(l1(), l2()))
    for p in (x, w):
        np.testing.assert_allclose(g12[p], g1[p] + g2[p], rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(2, 9), seed=st.integers(0, 10_000))
def test_layer_norm_standardizes_rows(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 5 + 3
    out = layer_norm(Tensor(x), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(rows=st.integers(1, 6), cols=st.integers(1, 9), shift=st.floats(-50, 50), seed=st.integers(0, 10_000))
def test_softmax_rows_and_shift_invariance(rows, cols, shift, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 3
    a = softmax(Tensor(x)).data
    b = softmax(Tensor(x + shift)).data
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_backward_visits_each_node_once():
    x = leaf([1.0, 2.0])
    y = T.mul(x, x)
    z = T.add(y, y)  # diamond: y feeds z twice
    order = T.topo_order(total(z))
    assert len(order) == len({id(n) for n in order})
    grads = backward(total(z))
    np.testing.assert_allclose(grads[x], 4 * x.data)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


# -- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": leaf([1.0, -2.0])}
    st_ = OptimizerState(lr=0.1)
    for _ in range(10):
        adam_step(st_, p, {"w": np.zeros(2)})
    assert np.array_equal(p["w"].data, [1.0, -2.0])
    assert st_.step == 10


def test_adam_first_step_is_lr_times_sign():
    # closed form: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
    g = np.array([0.3, -2.0, 5.0])
    lr, eps = 0.01, 1e-8
    expected = np.array([1.0, 1.0, 1.0]) - lr * g / (np.abs(g) + eps)
    p = {"w": leaf(np.ones(3))}
    adam_step(OptimizerState(lr=lr, eps=eps), p, {"w": g})
    np.testing.assert_allclose(p["w"].data, expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(np.abs(1.0 - p["w"].data), lr, rtol=1e-6)


def test_adam_zero_lr():
    p = {"w": leaf([3.0])}
    st_ = OptimizerState(lr=0.0)
    for _ in range(3):
        adam_step(st_, p, {"w": np.array([1.0])})
    assert p["w"].data[0] == 3.0


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(OptimizerState(), {"w": leaf([1.0, 2.0])}, {"w": np.ones(3)})


def test_adam_moments_mirror_params_and_step_increases():
    p = {"a": leaf(np.ones((2, 3))), "b": leaf(np.ones(4))}
    st_ = OptimizerState()
    steps = []
    for _ in range(3):
        adam_step(st_, p, {"a": np.ones((2, 3)), "b": np.ones(4)})
        steps.append(st_.step)
    assert steps == [1, 2, 3]
    assert st_.m["a"].shape == (2, 3) and st_.v["b"].shape == (4,)
