import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moddragon.nn_core import (Activation, CacheError, DenseLayer, Network,
                               NonFiniteGradientError, OptimizerState, ShapeError,
                               backward, forward, init_network, sgd_momentum_step)


def _fd_check(net, x, upstream, h=1e-5):
    """Worst relative error between analytic and central-difference gradients
    of the scalar ``upstream . net(x) + sum(l2 * W**2)``."""

    def loss():
        out, _ = forward(net, x)
        return float(np.sum(out * upstream)) + net.l2_penalty()

    _, cache = forward(net, x)
    grads = backward(net, cache, upstream)
    analytic = grads.flat() + [grads.input]
    params = net.parameters() + [x]
    worst = 0.0
    for p, a in zip(params, analytic):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = loss()
            p[idx] = old - h
            lm = loss()
            p[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - a[idx]) / max(abs(fd), abs(a[idx]), 1e-7))
    return worst


class TestForward:

    def test_identity_linear(self):
        net = Network([DenseLayer(np.eye(2), np.zeros(2), Activation.LINEAR)])
        out, _ = forward(net, [1.0, 2.0])
        np.testing.assert_array_equal(out, [1.0, 2.0])

    def test_zero_sigmoid_is_half(self, rng):
        net = Network([DenseLayer(np.zeros((3, 4)), np.zeros(3), Activation.SIGMOID)])
        out, _ = forward(net, rng.normal(size=4) * 100)
        np.testing.assert_array_equal(out, [0.5, 0.5, 0.5])

    def test_two_layer_hand_values(self):
        # hidden: z = [1*1 + 2*0 - 2, 3*1 + 4*0 - 1] = [-1, 2] -> ELU [e^-1 - 1, 2]
        # out: [a0 - a1, 0.5*a0 + 2*a1] + [0, 1]
        net = Network([
            DenseLayer([[1.0, 2.0], [3.0, 4.0]], [-2.0, -1.0], Activation.ELU),
            DenseLayer([[1.0, -1.0], [0.5, 2.0]], [0.0, 1.0], Activation.LINEAR),
        ])
        out, cache = forward(net, [1.0, 0.0])
        np.testing.assert_allclose(out, [-2.6321205588285577, 4.683939720585721], rtol=0, atol=1e-15)
        assert len(cache.pre) == len(cache.post) == 2

    def test_batch_rows_match_single_vectors(self, rng):
        net = init_network([(3, 4, "elu", 0.0), (4, 2, "sigmoid", 0.0)], seed=1)
        X = rng.normal(size=(5, 3))
        batch, _ = forward(net, X)
        for i in range(5):
            np.testing.assert_allclose(forward(net, X[i])[0], batch[i], rtol=1e-15)

    def test_repeated_calls_bit_identical(self, rng):
        net = init_network([(3, 6, "elu", 0.0), (6, 1, "linear", 0.0)], seed=2)
        x = rng.normal(size=(4, 3))
        a, _ = forward(net, x)
        b, _ = forward(net, x)
        assert a.tobytes() == b.tobytes()

    def test_wrong_width_names_layer(self):
        net = init_network([(3, 2, "linear", 0.0)], seed=0)
        with pytest.raises(ShapeError, match="layer 0"):
            forward(net, np.ones(4))

    def test_mismatched_layers_rejected(self):
        with pytest.raises(ShapeError, match="layer 1"):
            Network([DenseLayer(np.zeros((3, 2)), np.zeros(3)), DenseLayer(np.zeros((1, 4)), np.zeros(1))])

    def test_elu_continuous_at_zero(self):
        net = Network([DenseLayer([[1.0]], [0.0], Activation.ELU)])
        for x in (0.0, 1e-9, -1e-9):
            out, cache = forward(net, [x])
            assert out[0] == pytest.approx(x, abs=1e-15)
            g = backward(net, cache, [1.0])
            assert g.input[0] == pytest.approx(1.0, abs=1e-8)
        assert forward(net, [0.0])[0][0] == 0.0


class TestBackward:

    def test_linear_layer_gradient(self):
        x = np.array([2.0, -3.0])
        net = Network([DenseLayer(np.zeros((1, 2)), np.zeros(1), Activation.LINEAR)])
        _, cache = forward(net, x)
        g = backward(net, cache, [1.0])
        np.testing.assert_array_equal(g.weights[0], [[2.0, -3.0]])
        np.testing.assert_array_equal(g.biases[0], [1.0])

    def test_zero_upstream_leaves_only_l2(self, rng):
        net = init_network([(3, 4, "elu", 0.1), (4, 2, "sigmoid", 0.3)], seed=4)
        _, cache = forward(net, rng.normal(size=(6, 3)))
        g = backward(net, cache, np.zeros((6, 2)))
        for layer, dw, db in zip(net.layers, g.weights, g.biases):
            np.testing.assert_array_equal(dw, 2 * layer.l2_coefficient * layer.weights)
            np.testing.assert_array_equal(db, 0.0)

    def test_stale_cache_rejected(self, rng):
        net = init_network([(2, 2, "elu", 0.0)], seed=0)
        _, cache = forward(net, rng.normal(size=2))
        net.version += 1
        with pytest.raises(CacheError):
            backward(net, cache, np.ones(2))

    def test_foreign_cache_rejected(self, rng):
        a = init_network([(2, 2, "elu", 0.0)], seed=0)
        b = init_network([(2, 2, "elu", 0.0)], seed=0)
        _, cache = forward(a, rng.normal(size=2))
        with pytest.raises(CacheError):
            backward(b, cache, np.ones(2))

    @settings(max_examples=120, deadline=None)
    @given(
        dims=st.lists(st.integers(1, 10), min_size=2, max_size=4),
        acts=st.lists(st.sampled_from(list(Activation)), min_size=3, max_size=3),
        batch=st.integers(1, 4),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_matches_finite_differences(self, dims, acts, batch, seed):
        r = np.random.default_rng(seed)
        spec = [(dims[i], dims[i + 1], acts[i % 3], float(r.uniform(0, 0.1)))
                for i in range(len(dims) - 1)]
        net = init_network(spec, seed=r)
        for layer in net.layers:
            layer.bias[:] = r.normal(size=layer.out_dim) * 0.5
        x = r.normal(size=(batch, dims[0]))
        up = r.normal(size=(batch, dims[-1]))
        assert _fd_check(net, x, up) <= 1e-4


class TestSgdMomentum:

    def test_zero_momentum_is_plain_descent(self):
        p = [np.array([1.0, 2.0])]
        g = [np.array([0.5, -1.0])]
        sgd_momentum_step(p, g, OptimizerState.for_params(p, 0.1, 0.0))
        np.testing.assert_allclose(p[0], [0.95, 2.1], rtol=0, atol=1e-15)

    def test_two_steps_constant_gradient(self):
        # v1 = -0.1 g; v2 = 0.9 v1 - 0.1 g = -0.19 g
        g = np.array([1.0, -2.0])
        p = [np.zeros(2)]
        st_ = OptimizerState.for_params(p, 0.1, 0.9)
        sgd_momentum_step(p, [g], st_)
        np.testing.assert_allclose(p[0], -0.1 * g, atol=1e-15)
        sgd_momentum_step(p, [g], st_)
        np.testing.assert_allclose(p[0], -0.1 * g - 0.19 * g, atol=1e-15)

    def test_zero_gradient_fixed_point(self):
        p = [np.array([[1.0, -4.0]])]
        before = p[0].copy()
        sgd_momentum_step(p, [np.zeros((1, 2))], OptimizerState.for_params(p, 0.5, 0.9))
        np.testing.assert_array_equal(p[0], before)

    def test_quadratic_decreases(self, rng):
        A = rng.normal(size=(4, 4))
        H = A @ A.T + np.eye(4)
        x = [rng.normal(size=4)]
        f = lambda v: 0.5 * v @ H @ v  # noqa: E731
        before = f(x[0])
        sgd_momentum_step(x, [H @ x[0]], OptimizerState.for_params(x, 1e-3, 0.9))
        assert f(x[0]) < before

    def test_nonfinite_gradient_aborts(self):
        p = [np.zeros(2)]
        with pytest.raises(NonFiniteGradientError):
            sgd_momentum_step(p, [np.array([np.nan, 0.0])], OptimizerState.for_params(p, 0.1))
        np.testing.assert_array_equal(p[0], 0.0)

    def test_shape_mismatch(self):
        p = [np.zeros(2)]
        with pytest.raises(ShapeError):
            sgd_momentum_step(p, [np.zeros(3)], OptimizerState.for_params(p, 0.1))

    def test_state_validation(self):
        with pytest.raises(ValueError):
            OptimizerState([], learning_rate=0.0)
        with pytest.raises(ValueError):
            OptimizerState([], learning_rate=0.1, momentum=1.0)


class TestInit:

    def test_deterministic(self):
        spec = [(5, 7, "elu", 0.0), (7, 1, "linear", 0.01)]
        a, b = init_network(spec, seed=9), init_network(spec, seed=9)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.tobytes() == pb.tobytes()

    def test_representation_shape(self):
        net = init_network([(25, 200, "elu", 0.0)] + [(200, 200, "elu", 0.0)] * 2, seed=0)
        assert len(net.layers) == 3
        assert [l.out_dim for l in net.layers] == [200, 200, 200]
        assert all(l.activation is Activation.ELU for l in net.layers)

    def test_weights_within_bound(self):
        net = init_network([(25, 200, "elu", 0.0), (200, 3, "linear", 0.0)], seed=3)
        for layer in net.layers:
            bound = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            assert np.all(np.abs(layer.weights) <= bound)
            np.testing.assert_array_equal(layer.bias, 0.0)

    @pytest.mark.parametrize("dims", [(0, 3), (3, -1)])
    def test_bad_dims(self, dims):
        with pytest.raises(ShapeError):
            init_network([(*dims, "linear", 0.0)])

    def test_negative_l2_rejected(self):
        with pytest.raises(ValueError):
            DenseLayer(np.zeros((1, 1)), np.zeros(1), Activation.LINEAR, -1.0)
