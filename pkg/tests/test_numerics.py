import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynvq import numerics as nx
from oracles import central_difference, relative_error

finite = st.floats(-3, 3, allow_nan=False, width=64)


def _grad(f, x):
    leaf = nx.parameter(np.asarray(x, dtype=np.float64))
    with nx.Tape() as tape:
        out = f(leaf)
    return nx.backward(tape, out).get(leaf)


def test_constant_function_has_zero_gradient():
    x = nx.parameter(np.array(2.0))
    with nx.Tape() as tape:
        out = nx.add(nx.mul(x, 0.0), 7.0)
    assert nx.backward(tape, out)[x] == 0.0


def test_linear_gradient_is_exact():
    assert _grad(lambda x: nx.mul(x, 3.0), 2.0) == 3.0


def test_square_gradient_matches_central_difference():
    g = _grad(nx.square, 1.5)
    fd = central_difference(lambda a: float(a**2), np.array(1.5))
    assert g == pytest.approx(3.0, abs=1e-12)
    assert abs(g - fd) < 1e-6


def test_non_parameter_leaves_get_no_gradient():
    x = nx.parameter(np.ones(3))
    c = nx.Tensor(np.arange(3.0))
    with nx.Tape() as tape:
        out = nx.total(nx.mul(x, c))
    grads = nx.backward(tape, out)
    assert c not in grads and c.grad is None
    np.testing.assert_array_equal(grads[x], np.arange(3.0))


def test_backward_rejects_non_scalar_loss():
    x = nx.parameter(np.ones(3))
    with nx.Tape() as tape:
        out = nx.mul(x, 2.0)
    with pytest.raises(ValueError):
        nx.backward(tape, out)


def test_backward_rejects_loss_from_another_tape():
    x = nx.parameter(np.ones(2))
    with nx.Tape():
        out = nx.total(x)
    with nx.Tape() as other:
        pass
    with pytest.raises(nx.TapeError):
        nx.backward(other, out)


def test_backward_rejects_cycle():
    x = nx.parameter(np.ones(2))
    with nx.Tape() as tape:
        a = nx.mul(x, 2.0)
        b = nx.total(a)
    # rewire so the earlier node depends on the later one
    a._parents = (b,)
    a._backward = lambda g: (g.sum(),)
    with pytest.raises(nx.TapeError):
        nx.backward(tape, b)


def test_each_node_visited_once_in_reverse_order():
    seen = []
    x = nx.parameter(np.array(1.0))
    with nx.Tape() as tape:
        nodes = []
        cur = x
        for k in range(5):
            out = nx.mul(cur, 2.0)
            inner = out._backward

            def spy(g, k=k, inner=inner):
                seen.append(k)
                return inner(g)

            out._backward = spy
            nodes.append(out)
            cur = out
    nx.backward(tape, cur)
    assert seen == [4, 3, 2, 1, 0]
    assert x.grad == 32.0


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_forward_refuses_non_finite():
    with pytest.raises(nx.NonFiniteError):
        nx.mul(nx.Tensor(np.array([1e308])), 10.0)


def test_stop_gradient_blocks_backward():
    g = _grad(lambda x: nx.total(nx.add(x, nx.stop_gradient(nx.mul(x, 5.0)))), np.ones(3))
    np.testing.assert_array_equal(g, np.ones(3))


def test_grad_check_linear_is_tight():
    assert nx.grad_check(lambda x: nx.total(nx.mul(x, np.array([1.0, -2.0, 3.0]))), np.array([0.3, 0.1, -2.0])) <= 1e-10


def test_grad_check_quadratic():
    assert nx.grad_check(lambda x: nx.total(nx.square(x)), np.array([0.5, -1.5, 2.0]), step=1e-5) <= 1e-6


def test_grad_check_raises_on_nan():
    def bad(x):
        return nx.Tensor(np.array(np.nan))

    with pytest.raises(nx.NonFiniteError):
        nx.grad_check(bad, np.array([1.0]))


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        nx.grad_check(lambda x: nx.total(x), np.ones(2), step=0.0)


# every differentiable operation, on small random inputs
def _ops(rng):
    a = rng.standard_normal((4, 3))
    b = rng.standard_normal((3, 2))
    w = rng.standard_normal((3, 3))
    starts = np.array([0, 2])
    groups = np.array([0, 1, 0])
    idx = np.array([2, 0, 2, 1])
    return {
        "add": (lambda x: nx.total(nx.square(nx.add(x, a))), a * 0.5),
        "sub": (lambda x: nx.total(nx.square(nx.sub(a, x))), a * 0.3),
        "mul": (lambda x: nx.total(nx.mul(x, nx.tanh(x))), a),
        "matmul": (lambda x: nx.total(nx.square(nx.matmul(x, b))), a),
        "tanh": (lambda x: nx.total(nx.tanh(x)), a),
        "mean": (lambda x: nx.mean(nx.square(x)), a),
        "mse": (lambda x: nx.mse(x, a[::-1]), a),
        "take_rows": (lambda x: nx.total(nx.square(nx.take_rows(x, idx))), w),
        "concat_rows": (lambda x: nx.total(nx.square(nx.concat_rows([x, nx.tanh(x)]))), a),
        "log_softmax": (lambda x: nx.total(nx.mul(nx.log_softmax(x), a)), a),
        "group_logsumexp": (lambda x: nx.total(nx.mul(nx.group_logsumexp(x, groups, 2), a[:, :2])), a),
        "pairwise_distance": (lambda x: nx.total(nx.pairwise_distance(x, b)), a[:, :2] + 3.0),
        "segment_mean": (lambda x: nx.total(nx.square(nx.segment_mean(x, starts))), a),
        "repeat_rows": (lambda x: nx.total(nx.square(nx.repeat_rows(x, np.array([1, 3, 2, 1])))), a),
        "edge_conv1d": (
            lambda x: nx.total(nx.square(nx.edge_conv1d(x, np.ones((3, 3, 2)) * 0.2, np.zeros(2), starts))),
            a,
        ),
        "tanh_recurrence": (lambda x: nx.total(nx.square(nx.tanh_recurrence(x, w * 0.4, starts))), a),
        "tanh_recurrence_weights": (lambda x: nx.total(nx.tanh_recurrence(nx.Tensor(a), x, starts)), w * 0.4),
    }


@pytest.mark.parametrize("name", list(_ops(np.random.default_rng(0))))
def test_every_operation_passes_gradient_check(name):
    f, x = _ops(np.random.default_rng(3))[name]
    assert nx.grad_check(f, x, step=1e-5) <= 1e-4


def test_edge_conv_weight_gradient_against_independent_difference():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 2))
    bias = rng.standard_normal(3)
    starts = np.array([0, 4])

    def f(w):
        return float(np.sum(nx.edge_conv1d(nx.Tensor(x), nx.Tensor(w), nx.Tensor(bias), starts).data ** 2))

    w0 = rng.standard_normal((3, 2, 3))
    g = _grad(lambda w: nx.total(nx.square(nx.edge_conv1d(nx.Tensor(x), w, nx.Tensor(bias), starts))), w0)
    assert relative_error(g, central_difference(f, w0)) <= 1e-4


def test_edge_conv_does_not_leak_across_sequences():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((7, 2))
    w = rng.standard_normal((3, 2, 4))
    b = np.zeros(4)
    joint = nx.edge_conv1d(x, w, b, [0, 3]).data
    first = nx.edge_conv1d(x[:3], w, b, [0]).data
    second = nx.edge_conv1d(x[3:], w, b, [0]).data
    np.testing.assert_allclose(joint, np.vstack([first, second]), rtol=0, atol=1e-14)


def test_recurrence_resets_at_sequence_start():
    rng = np.random.default_rng(4)
    pre = rng.standard_normal((5, 3))
    wh = rng.standard_normal((3, 3))
    joint = nx.tanh_recurrence(pre, wh, [0, 2]).data
    np.testing.assert_allclose(joint[2:], nx.tanh_recurrence(pre[2:], wh, [0]).data, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite))
def test_backward_is_deterministic(x):
    f = lambda t: nx.total(nx.tanh(nx.matmul(t, np.array([[1.0, 2.0], [0.5, -1.0]]))))  # noqa: E731
    np.testing.assert_array_equal(_grad(f, x), _grad(f, x))


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


def test_adam_defaults():
    s = nx.AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (1e-3, 0.9, 0.999, 1e-6)


def test_adam_first_step_by_hand():
    s = nx.AdamState()
    out = nx.adam_step(s, {"w": np.array(0.0)}, {"w": np.array(1.0)})
    # m_hat = v_hat = 1 at t=1, so the step is lr / (1 + eps)
    assert out["w"] == pytest.approx(-1e-3 / (1 + 1e-6), rel=1e-12)
    assert s.step == 1


def test_adam_matches_textbook_update_over_several_steps():
    rng = np.random.default_rng(5)
    s = nx.AdamState(lr=0.01)
    p = rng.standard_normal(4)
    m = np.zeros(4)
    v = np.zeros(4)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p = nx.adam_step(s, {"p": p}, {"p": g})["p"]
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-6)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), st.integers(0, 5))
def test_adam_zero_gradient_is_identity(p, warm):
    s = nx.AdamState()
    rng = np.random.default_rng(warm)
    for _ in range(warm):
        p2 = nx.adam_step(s, {"p": p}, {"p": rng.standard_normal(p.shape)})["p"]
    before = s.step
    cur = p2 if warm else p
    out = nx.adam_step(s, {"p": cur}, {"p": np.zeros_like(cur)})["p"]
    np.testing.assert_array_equal(out, cur)
    assert s.step == before + 1


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        nx.adam_step(nx.AdamState(), {"p": np.zeros(3)}, {"p": np.zeros(4)})
    s = nx.AdamState()
    nx.adam_step(s, {"p": np.zeros(3)}, {"p": np.ones(3)})
    with pytest.raises(ValueError):
        nx.adam_step(s, {"p": np.zeros(4)}, {"p": np.ones(4)})


def test_adam_moments_grow_with_parameter():
    s = nx.AdamState()
    nx.adam_step(s, {"b": np.zeros((2, 3))}, {"b": np.ones((2, 3))})
    s.ensure("b", (4, 3))
    assert s.m["b"].shape == (4, 3) and not s.m["b"][2:].any()
    with pytest.raises(ValueError):
        s.ensure("b", (1, 3))
