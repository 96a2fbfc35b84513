import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfflow.numerics import (
    AdamState,
    Mlp,
    ShapeError,
    Tensor,
    UnsupportedPrimitiveError,
    adam_step,
    check_gradients,
    concat,
    finite_diff_grad,
    grad_of,
    max_relative_error,
    mlp_forward,
)

# Forward pass of Mlp(3, 2, 2, hidden=(5, 5), seed=123), frozen once and
# cross-checked against a plain-numpy evaluation of the same weights.
GOLDEN_FORWARD = [
    -0.07996416565400422,
    -0.0058103291035994376,
    0.22377994876799345,
    0.24685494993333032,
    -0.15628827432112807,
    0.5919336417795277,
    0.09359749668148357,
    0.2868826811865507,
]


def _single_layer(context_dim, horizon, action_dim):
    net = Mlp(context_dim, horizon, action_dim, hidden=())
    return net


class TestMlpForward:
    def test_identity_layer_passes_input_through(self):
        # m + H*d + 1 = 2*H*d when m = 1, H*d = 2
        net = _single_layer(1, 1, 2)
        assert net.widths == (4, 4)
        net.weights[0].data = np.eye(4)
        net.biases[0].data = np.zeros(4)
        out = net.forward(np.array([0.7]), np.array([[0.1, -0.3]]), 0.25).data[0]
        np.testing.assert_array_equal(out, [0.7, 0.1, -0.3, 0.25])

    def test_zero_weights_return_bias(self):
        net = Mlp(2, 2, 2, hidden=(3,))
        for w in net.weights:
            w.data[:] = 0.0
        b = np.arange(8.0)
        net.biases[-1].data = b.copy()
        out = net.forward(np.zeros(2), np.zeros((2, 2)), 0.0).data[0]
        np.testing.assert_array_equal(out, b)

    def test_golden_regression(self):
        net = Mlp(3, 2, 2, hidden=(5, 5), seed=123)
        ctx = np.array([0.1, -0.2, 0.3])
        x = np.array([[0.5, -0.5], [1.0, 0.25]])
        out = net.forward(ctx, x, 0.3).data[0]
        np.testing.assert_allclose(out, GOLDEN_FORWARD, rtol=0, atol=1e-14)

    def test_output_width_is_twice_chunk(self):
        net = Mlp(4, 3, 2, hidden=(7, 6))
        assert net.widths == (4 + 6 + 1, 7, 6, 12)
        for a, b in zip(net.weights[:-1], net.weights[1:]):
            assert a.shape[1] == b.shape[0]

    def test_batched_forward_matches_rows(self):
        net = Mlp(2, 2, 2, hidden=(4,), seed=1)
        rng = np.random.default_rng(0)
        ctx = rng.normal(size=(3, 2))
        x = rng.normal(size=(3, 2, 2))
        t = np.array([0.1, 0.5, 0.9])
        batched = net.forward(ctx, x, t).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], net.forward(ctx[i], x[i], t[i]).data[0], atol=1e-15)

    @pytest.mark.parametrize(
        "ctx_shape, x_shape",
        [((3,), (2, 2)), ((2,), (3, 2)), ((2, 2), (3, 2, 2))],
    )
    def test_shape_mismatch_raises(self, ctx_shape, x_shape):
        net = Mlp(2, 2, 2, hidden=(4,))
        with pytest.raises(ShapeError):
            mlp_forward(net, np.zeros(ctx_shape), np.zeros(x_shape), 0.5)

    @pytest.mark.parametrize("t", [-0.01, 1.01])
    def test_time_outside_unit_interval(self, t):
        net = Mlp(2, 2, 2, hidden=(4,))
        with pytest.raises(ValueError):
            net.forward(np.zeros(2), np.zeros((2, 2)), t)

    def test_same_seed_is_bitwise_deterministic(self):
        a = Mlp(2, 2, 2, hidden=(8, 8), seed=9)
        b = Mlp(2, 2, 2, hidden=(8, 8), seed=9)
        for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()
        ctx, x = np.ones(2), np.full((2, 2), 0.3)
        assert a.forward(ctx, x, 0.4).data.tobytes() == b.forward(ctx, x, 0.4).data.tobytes()

    def test_load_arrays_rejects_wrong_shape(self):
        net = Mlp(2, 2, 2, hidden=(4,))
        arrays = {n: p.data.copy() for n, p in net.named_parameters()}
        arrays["layer0.bias"] = np.zeros(5)
        with pytest.raises(ShapeError):
            net.load_arrays(arrays)


class TestBackprop:
    def test_square(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        _, (g,) = grad_of(lambda: x.square(), [x])
        assert g == 6.0

    def test_pow_two_matches_square(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        _, (g,) = grad_of(lambda: (x**2).sum(), [x])
        np.testing.assert_array_equal(g, [3.0, -4.0])

    @pytest.mark.parametrize("x0, expected", [(25.0, 0.0), (-7.0, 0.0), (0.0, 1.0), (-5.0, 1.0), (20.0, 1.0)])
    def test_clamp_gradient(self, x0, expected):
        x = Tensor(np.array(x0), requires_grad=True)
        _, (g,) = grad_of(lambda: x.clamp(-5.0, 20.0), [x])
        assert g == expected

    def test_unsupported_primitives_raise(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with pytest.raises(UnsupportedPrimitiveError):
            x**3
        with pytest.raises(UnsupportedPrimitiveError):
            abs(x)
        with pytest.raises(UnsupportedPrimitiveError):
            x / x

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_broadcast_gradients_unbroadcast(self):
        w = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.zeros(3), requires_grad=True)
        _, (gw, gb) = grad_of(lambda: (w + b).sum(), [w, b])
        np.testing.assert_array_equal(gb, [2.0, 2.0, 2.0])
        np.testing.assert_array_equal(gw, np.ones((2, 3)))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        _, (g,) = grad_of(lambda: x * x + x, [x])
        assert g == 5.0

    def test_concat_and_getitem(self):
        a = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        b = Tensor(np.array([[3.0]]), requires_grad=True)
        _, (ga, gb) = grad_of(lambda: concat([a, b], axis=1)[:, 1:].square().sum(), [a, b])
        np.testing.assert_array_equal(ga, [[0.0, 4.0]])
        np.testing.assert_array_equal(gb, [[6.0]])

    @pytest.mark.parametrize("seed", range(3))
    def test_random_net_matches_finite_differences(self, seed):
        net = Mlp(3, 2, 2, hidden=(6, 6), seed=seed)
        rng = np.random.default_rng(seed)
        ctx, x, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 2, 2)), rng.uniform(size=4)
        target = rng.normal(size=(4, 8))

        def loss():
            out = net.forward(ctx, x, t)
            return ((out - target).square() * 0.5 + out.tanh().exp().log()).mean()

        err, _, _ = check_gradients(loss, net.parameters())
        assert err < 1e-5

    def test_gradients_are_deterministic(self):
        net = Mlp(2, 2, 2, hidden=(5,), seed=4)
        ctx, x = np.ones((3, 2)), np.full((3, 2, 2), 0.2)
        fn = lambda: net.forward(ctx, x, 0.5).square().mean()
        _, g1 = grad_of(fn, net.parameters())
        _, g2 = grad_of(fn, net.parameters())
        assert all(a.tobytes() == b.tobytes() for a, b in zip(g1, g2))


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = np.array([1.0])
        state = AdamState.for_params([p], lr=1e-3)
        adam_step([p], [np.array([0.5])], state)
        # m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        assert p[0] == pytest.approx(1.0 - 1e-3, abs=1e-10)
        assert state.step == 1

    def test_zero_gradient_is_a_no_op(self):
        p = np.array([0.3, -1.2])
        before = p.copy()
        state = AdamState.for_params([p])
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p, before)
        assert state.step == 5

    def test_quadratic_descends(self):
        # independent scalar recursion of the same update rule
        theta, m, v = 1.0, 0.0, 0.0
        for k in range(1, 101):
            g = 2 * theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta -= 0.1 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
        p = np.array([1.0])
        state = AdamState.for_params([p], lr=0.1)
        for _ in range(100):
            adam_step([p], [2 * p.copy()], state)
        assert abs(p[0]) < 1.0
        assert p[0] == pytest.approx(theta, abs=1e-12)

    def test_state_shapes_follow_params(self):
        params = [Tensor(np.zeros((2, 3))), Tensor(np.zeros(4))]
        state = AdamState.for_params(params)
        assert [m.shape for m in state.m] == [(2, 3), (4,)]

    def test_shape_mismatch(self):
        p = np.zeros(3)
        state = AdamState.for_params([p])
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(2)], state)


class TestFiniteDiff:
    def test_linear(self):
        x = np.array([0.7])
        g = finite_diff_grad(lambda z: 3.0 * z[0], x, h=1e-5)
        assert g[0] == pytest.approx(3.0, abs=1e-9)

    def test_sum_of_squares(self):
        g = finite_diff_grad(lambda z: float(np.sum(z**2)), np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_restores_input(self):
        x = np.array([1.0, -2.0, 3.0])
        finite_diff_grad(lambda z: float(np.prod(z)), x, relative=True)
        np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])

    def test_max_relative_error_scale(self):
        assert max_relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)
        assert max_relative_error(np.zeros(3), np.zeros(3)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=6))
def test_clamp_gradient_is_indicator(values):
    x = Tensor(np.array(values), requires_grad=True)
    _, (g,) = grad_of(lambda: x.clamp(-5.0, 20.0).sum(), [x])
    arr = np.array(values)
    np.testing.assert_array_equal(g, ((arr >= -5.0) & (arr <= 20.0)).astype(float))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=5))
def test_elementwise_chain_matches_finite_differences(values):
    x0 = np.array(values)

    def value(z):
        t = Tensor(z)
        return float(((t * t).exp() * 0.1 + (t.tanh() - t).square()).sum().data)

    x = Tensor(x0.copy(), requires_grad=True)
    _, (g,) = grad_of(lambda: ((x * x).exp() * 0.1 + (x.tanh() - x).square()).sum(), [x])
    fd = finite_diff_grad(value, x0.copy(), relative=True)
    assert max_relative_error(g, fd) < 1e-6
