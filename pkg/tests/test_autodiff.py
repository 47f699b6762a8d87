import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal

from geogan.autodiff import (BACKWARD_RULES, Adam, AdamState, Conv2d, Graph, Tensor, adam_step,
                             backward, check_primitives, finite_diff_check, no_grad, set_debug)
from geogan.autodiff import functional as F
from geogan.autodiff.gradcheck import primitive_cases
from geogan.exceptions import NumericError, StateError, ValidationError

REQUIRED_PRIMITIVES = {"conv2d", "conv_transpose2d", "leaky_relu", "relu", "sigmoid", "tanh",
                       "dropout", "concat", "add", "mul", "sub", "scale", "mean", "sum"}


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# -- forward ---------------------------------------------------------------------

def test_forward_examples():
    x = Tensor(np.array([-1.0, 2.0]))
    np.testing.assert_allclose(F.leaky_relu(x).data, [-0.2, 2.0])
    assert F.sigmoid(Tensor(0.0)).item() == 0.5
    assert np.array_equal(F.reshape(x, (2,)).data, x.data)


def test_sigmoid_is_stable_at_extremes():
    y = F.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_every_required_primitive_has_a_rule():
    assert REQUIRED_PRIMITIVES <= set(BACKWARD_RULES)
    assert REQUIRED_PRIMITIVES <= set(primitive_cases(0))


# -- backward -----------------------------------------------------------------

def test_mean_gradient_is_one_over_n():
    x = leaf(np.arange(6.0))
    backward(F.mean(x))
    np.testing.assert_allclose(x.grad, 1 / 6)


def test_sum_of_product_gradient():
    x, y = leaf([1.0, -2.0, 3.0]), np.array([4.0, 5.0, -6.0])
    backward(F.sum(F.mul(x, y)))
    assert np.array_equal(x.grad, y)


def test_shared_node_visited_once():
    x = leaf([1.5, -2.0])
    h = F.mul(x, x)
    loss = F.sum(F.add(h, x))
    g = Graph.trace(loss)
    assert len({id(n) for n in g.nodes}) == len(g.nodes)
    backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_gradient_accumulation_is_linear():
    rng = np.random.default_rng(0)
    w = leaf(rng.standard_normal((2, 3, 3, 3)))
    x = Tensor(rng.standard_normal((1, 3, 6, 6)))

    def fa():
        return F.sum(F.tanh(F.conv2d(x, w)))

    def fb():
        return F.mean(F.sigmoid(F.conv2d(x, w, stride=2)))

    backward(F.add(fa(), fb()))
    joint = w.grad.copy()
    w.grad = None
    backward(fa())
    backward(fb())
    np.testing.assert_allclose(w.grad, joint, rtol=1e-12, atol=1e-14)


def test_backward_errors():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValidationError):
        backward(F.scale(x, 2.0))
    with pytest.raises(StateError):
        backward(Tensor(1.0))
    with pytest.raises(TypeError):
        backward(1.0)


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with no_grad():
        y = F.scale(x, 3.0)
    assert y.is_leaf and not y.requires_grad


def test_debug_mode_raises_on_non_finite():
    set_debug(True)
    try:
        with pytest.raises(NumericError):
            F.add(Tensor(np.array([np.inf])), 1.0)
    finally:
        set_debug(False)
    assert np.isinf(F.add(Tensor(np.array([np.inf])), 1.0).data[0])


# -- finite differences ----------------------------------------------------------

@settings(max_examples=15)
@given(st.integers(0, 2 ** 31 - 1))
def test_every_primitive_passes_fd_on_random_shapes(seed):
    reports = check_primitives(seed=seed)
    for name, rep in reports.items():
        assert rep.passed, (name, rep.max_rel_err)
        for c in rep.checks:
            assert c.checked >= 1


def test_random_conv_net_matches_fd():
    rng = np.random.default_rng(7)
    x = leaf(rng.standard_normal((2, 2, 8, 8)))
    w1 = leaf(rng.standard_normal((4, 2, 4, 4)) * 0.5)
    w2 = leaf(rng.standard_normal((4, 3, 4, 4)) * 0.5)
    b2 = leaf(rng.standard_normal(3))
    target = rng.random((2, 3, 8, 8))

    def fn():
        h = F.tanh(F.instance_norm(F.conv2d(x, w1, stride=2, padding=1)))
        return F.l1_loss(F.sigmoid(F.conv_transpose2d(h, w2, b2, 2, 1)), target)

    rep = finite_diff_check(fn, {"x": x, "w1": w1, "w2": w2, "b2": b2}, h=1e-5)
    assert rep.passed, rep.checks


def test_linear_function_is_exact():
    rng = np.random.default_rng(1)
    w = leaf(rng.standard_normal((3, 5, 1, 1)))
    x = Tensor(rng.standard_normal((1, 5, 1, 1)))
    rep = finite_diff_check(lambda: F.sum(F.conv2d(x, w)), {"w": w}, tol=1e-8)
    assert rep.passed and rep.max_rel_err < 1e-8


def test_identity_one_by_one_conv_is_elementwise():
    rng = np.random.default_rng(2)
    w = leaf(np.eye(3).reshape(3, 3, 1, 1))
    x = leaf(rng.standard_normal((2, 3, 4, 4)))
    coef = rng.standard_normal((2, 3, 4, 4))
    out = F.conv2d(x, w)
    assert np.array_equal(out.data, x.data)
    rep = finite_diff_check(lambda: F.sum(F.mul(F.conv2d(x, w), coef)), {"x": x, "w": w}, tol=1e-8)
    assert rep.max_rel_err < 1e-8


def test_relu_kink_coordinate_is_skipped():
    x = leaf([0.0, 1.0, -1.0])
    rep = finite_diff_check(lambda: F.sum(F.relu(x)), {"x": x})
    c = rep.by_name()["x"]
    assert c.skipped == 1 and c.checked == 2
    assert rep.passed


def test_corrupted_rule_is_detected(monkeypatch):
    good = BACKWARD_RULES["tanh"]
    monkeypatch.setitem(BACKWARD_RULES, "tanh", lambda y, g: tuple(1.5 * v for v in good(y, g)))
    rep = check_primitives(seed=0)["tanh"]
    assert not rep.passed


# -- convolution oracles ------------------------------------------------------------

@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_scipy_correlate(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ref = np.zeros_like(out)
    for n in range(2):
        for co in range(4):
            full = sum(signal.correlate2d(xp[n, ci], w[co, ci], mode="valid") for ci in range(3))
            ref[n, co] = full[::stride, ::stride] + b[co]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_transpose_is_adjoint_of_conv():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((5, 3, 4, 4))
    x = rng.standard_normal((2, 3, 8, 8))
    y = rng.standard_normal((2, 5, 4, 4))
    lhs = np.sum(F.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data * y)
    rhs = np.sum(x * F.conv_transpose2d(Tensor(y), Tensor(w), stride=2, padding=1).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValidationError):
        F.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValidationError):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- dropout ------------------------------------------------------------------------

def test_dropout_eval_is_identity():
    x = Tensor(np.arange(5.0))
    assert F.dropout(x, 0.5, None, training=False) is x


def test_dropout_is_unbiased():
    rng = np.random.default_rng(123)
    p, n_masks = 0.2, 20_000
    x = np.array([1.0, 2.0, 3.0, 4.0])
    draws = np.stack([F.dropout(Tensor(x), p, rng).data for _ in range(n_masks)])
    sigma = x * np.sqrt(p / (1 - p)) / np.sqrt(n_masks)
    assert np.all(np.abs(draws.mean(axis=0) - x) < 3 * sigma)
    assert set(np.unique(draws[:, 0])) == {0.0, 1.25}


def test_dropout_bad_p():
    with pytest.raises(ValidationError):
        F.dropout(Tensor([1.0]), 1.0, np.random.default_rng(0))


# -- Adam ------------------------------------------------------------------------------

def test_adam_first_step_is_minus_lr():
    state = AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    (p,) = adam_step([np.array([0.0])], [np.array([1.0])], state)
    assert p[0] == pytest.approx(-0.1, rel=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_leaves_params():
    p0 = np.array([1.0, -2.0])
    state = AdamState(lr=0.1)
    (p,) = adam_step([p0], [np.zeros(2)], state)
    assert np.array_equal(p, p0)
    (p,) = adam_step([p], [None], state)
    assert np.array_equal(p, p0) and state.step == 2


@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.integers(1, 200))
def test_adam_step_is_bounded_by_lr(g, steps):
    state = AdamState(lr=0.01)
    p = np.array([0.0])
    for _ in range(steps):
        (q,) = adam_step([p], [np.array([g])], state)
        assert abs(q[0] - p[0]) <= 0.01 * (1 + 1e-6)
        p = q


def test_adam_state_validation():
    with pytest.raises(ValidationError):
        AdamState(lr=0.0)
    with pytest.raises(ValidationError):
        AdamState(beta1=1.0)
    state = AdamState()
    adam_step([np.zeros(2)], [np.zeros(2)], state)
    with pytest.raises(ValidationError):
        adam_step([np.zeros(3)], [np.zeros(3)], state)


def test_adam_wrapper_updates_module():
    conv = Conv2d(1, 1, 1, rng=np.random.default_rng(0))
    opt = Adam(conv.parameters(), lr=0.05)
    before = conv.weight.data.copy()
    backward(F.sum(conv(Tensor(np.ones((1, 1, 2, 2), np.float32)))))
    opt.step()
    assert conv.weight.data[0, 0, 0, 0] == pytest.approx(before[0, 0, 0, 0] - 0.05, rel=1e-4)
    opt.zero_grad()
    assert conv.weight.grad is None


# -- modules -----------------------------------------------------------------------------

def test_state_dict_round_trip_and_cast():
    a = Conv2d(2, 3, 3, rng=np.random.default_rng(0))
    b = Conv2d(2, 3, 3, rng=np.random.default_rng(1))
    b.load_state_dict(a.state_dict())
    assert all(np.array_equal(a.state_dict()[k], v) for k, v in b.state_dict().items())
    b.astype(np.float64)
    assert b.weight.dtype == np.float64
    with pytest.raises(ValidationError):
        b.load_state_dict({"weight": a.weight.data})


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(5)
        w = leaf(rng.standard_normal((2, 1, 3, 3)))
        x = Tensor(rng.standard_normal((1, 1, 6, 6)))
        backward(F.mean(F.leaky_relu(F.conv2d(x, w, padding=1))))
        return w.grad

    assert run().tobytes() == run().tobytes()
