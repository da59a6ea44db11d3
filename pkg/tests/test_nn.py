"""Forward/backward correctness, splitting, SGD, and the FD oracle."""

import numpy as np
import pytest

from sflsim import nn
from sflsim.losses import cross_entropy


def reference_forward(layers, x):
    """Independent re-implementation of the forward pass (loops, no cache)."""
    out = np.array(x, dtype=float)
    for layer in layers:
        if isinstance(layer, nn.Dense):
            nxt = np.zeros((out.shape[0], layer.out_units))
            for r in range(out.shape[0]):
                for c in range(layer.out_units):
                    acc = layer.bias[c]
                    for k in range(layer.in_units):
                        acc += out[r, k] * layer.weights[k, c]
                    nxt[r, c] = acc
            out = nxt
        else:
            out = np.where(out > 0, out, 0.0)
    return out


def random_mlp(rng, widths=None, cut=None):
    if widths is None:
        depth = int(rng.integers(2, 4))
        widths = [int(rng.integers(2, 6)) for _ in range(depth + 1)]
    if cut is None:
        cut = int(rng.integers(1, len(mlp_layers_count(widths))))
    return nn.init_mlp(widths, cut, rng)


def mlp_layers_count(widths):
    # dense layers interleaved with relus, no relu after the last dense
    n_dense = len(widths) - 1
    return range(2 * n_dense - 1)


def mse_loss(layers, batch):
    x, target = batch
    out, _ = nn.forward(layers, x)
    return float(((out - target) ** 2).mean())


class TestForward:
    def test_identity_dense(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        layer = nn.Dense(weights=np.eye(2), bias=np.zeros(2))
        out, cache = nn.forward([layer], x)
        np.testing.assert_array_equal(out, x)
        assert len(cache.inputs) == 1

    def test_relu_definition(self):
        out, _ = nn.forward([nn.Relu()], np.array([[-1.0, 2.0]]))
        np.testing.assert_array_equal(out, [[0.0, 2.0]])

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            model = nn.init_mlp([3, 4, 2], 1, rng)
            x = rng.normal(size=(6, 3))
            out, _ = nn.forward(model.layers, x)
            np.testing.assert_allclose(out, reference_forward(model.layers, x), rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        model = nn.init_mlp([3, 4, 2], 1, np.random.default_rng(0))
        with pytest.raises(ValueError):
            nn.forward(model.layers, np.zeros((4, 5)))

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        model = nn.init_mlp([4, 3, 2], 1, rng)
        x = rng.normal(size=(5, 4))
        a, _ = nn.forward(model.layers, x)
        b, _ = nn.forward(model.layers, x)
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(3)
        model = nn.init_mlp([3, 4, 2], 1, rng)
        x = rng.normal(size=(5, 3))
        out, cache = nn.forward(model.layers, x)
        grads, input_grad = nn.backward(model.layers, cache, np.zeros_like(out))
        np.testing.assert_array_equal(input_grad, np.zeros_like(x))
        for g in grads:
            if g is not None:
                assert not g.weights.any() and not g.bias.any()

    def test_single_dense_outer_product(self):
        # batch of one: dW = x (outer) upstream, db = upstream
        x = np.array([[1.0, 2.0, -1.0]])
        up = np.array([[0.5, -2.0]])
        layer = nn.Dense(weights=np.zeros((3, 2)), bias=np.zeros(2))
        _, cache = nn.forward([layer], x)
        grads, _ = nn.backward([layer], cache, up)
        np.testing.assert_allclose(grads[0].weights, np.outer(x[0], up[0]))
        np.testing.assert_allclose(grads[0].bias, up[0])

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(19)
        checked = 0
        for _ in range(25):
            model = nn.init_mlp(
                [int(rng.integers(2, 5)) for _ in range(3)], 1, rng
            )
            x = rng.normal(size=(int(rng.integers(1, 5)), model.layers[0].in_units))
            target = rng.normal(size=(x.shape[0], nn.stack_output_width(model.layers)))
            out, cache = nn.forward(model.layers, x)
            upstream = 2.0 * (out - target) / out.size
            grads, _ = nn.backward(model.layers, cache, upstream)
            fd = nn.finite_difference_grad(model.layers, (x, target), mse_loss)
            for g, f in zip(grads, fd):
                if g is None:
                    continue
                np.testing.assert_allclose(g.weights, f.weights, rtol=1e-4, atol=1e-8)
                np.testing.assert_allclose(g.bias, f.bias, rtol=1e-4, atol=1e-8)
                checked += 1
        assert checked >= 20

    def test_upstream_shape_rejected(self):
        model = nn.init_mlp([3, 4, 2], 1, np.random.default_rng(0))
        _, cache = nn.forward(model.layers, np.zeros((4, 3)))
        with pytest.raises(ValueError):
            nn.backward(model.layers, cache, np.zeros((4, 3)))


class TestSgd:
    def test_eta_zero_is_identity(self):
        rng = np.random.default_rng(1)
        layers = [nn.Dense(weights=rng.normal(size=(2, 2)), bias=rng.normal(size=2))]
        grads = [nn.DenseGrad(weights=np.ones((2, 2)), bias=np.ones(2))]
        stepped = nn.sgd_step(layers, grads, 0.0)
        np.testing.assert_array_equal(stepped[0].weights, layers[0].weights)

    def test_arithmetic(self):
        layer = nn.Dense(weights=np.array([[1.0]]), bias=np.zeros(1))
        grads = [nn.DenseGrad(weights=np.array([[2.0]]), bias=np.zeros(1))]
        stepped = nn.sgd_step([layer], grads, 0.5)
        np.testing.assert_array_equal(stepped[0].weights, [[0.0]])

    def test_converges_on_quadratic(self):
        # minimize (w - 3)^2 via its exact gradient 2(w - 3)
        layer = nn.Dense(weights=np.array([[10.0]]), bias=np.zeros(1))
        layers = [layer]
        for _ in range(200):
            g = 2.0 * (layers[0].weights - 3.0)
            layers = nn.sgd_step(
                layers, [nn.DenseGrad(weights=g, bias=np.zeros(1))], 0.1
            )
        assert abs(layers[0].weights[0, 0] - 3.0) < 1e-6


class TestSplitJoin:
    def test_split_sizes(self):
        model = nn.init_mlp([3, 4, 4, 2], 2, np.random.default_rng(0))
        assert len(model.layers) == 5
        client, server = nn.split_model(model)
        assert len(client) == 2 and len(server) == 3

    def test_roundtrip_identical(self):
        model = nn.init_mlp([3, 4, 2], 2, np.random.default_rng(5))
        rebuilt = nn.join_models(*nn.split_model(model))
        assert rebuilt.cut_index == model.cut_index
        np.testing.assert_array_equal(
            nn.parameter_vector(rebuilt.layers), nn.parameter_vector(model.layers)
        )

    def test_cut_out_of_range(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            nn.init_mlp([3, 4, 2], 0, rng)
        with pytest.raises(ValueError):
            nn.init_mlp([3, 4, 2], 3, rng)

    def test_split_transparency(self):
        # gradients through client-forward/server-forward/server-backward/
        # client-backward equal the unsplit model's gradients
        rng = np.random.default_rng(23)
        for _ in range(10):
            widths = [int(rng.integers(2, 6)) for _ in range(4)]
            n_layers = 2 * (len(widths) - 1) - 1
            cut = int(rng.integers(1, n_layers))
            model = nn.init_mlp(widths, cut, rng)
            x = rng.normal(size=(4, widths[0]))
            y = rng.integers(0, widths[-1], size=4)

            out, cache = nn.forward(model.layers, x)
            loss = cross_entropy(out, y)
            whole, _ = nn.backward(model.layers, cache, loss.logit_grad)

            client, server = nn.split_model(model)
            a, ccache = nn.forward(client, x)
            logits, scache = nn.forward(server, a)
            sloss = cross_entropy(logits, y)
            sgrads, cut_grad = nn.backward(server, scache, sloss.logit_grad)
            cgrads, _ = nn.backward(client, ccache, cut_grad)

            split_all = cgrads + sgrads
            for gw, gs in zip(whole, split_all):
                if gw is None:
                    continue
                np.testing.assert_allclose(gw.weights, gs.weights, rtol=1e-6, atol=1e-12)
                np.testing.assert_allclose(gw.bias, gs.bias, rtol=1e-6, atol=1e-12)


class TestFiniteDifference:
    def test_constant_loss_zero_grads(self):
        model = nn.init_mlp([2, 3, 2], 1, np.random.default_rng(2))
        fd = nn.finite_difference_grad(model.layers, None, lambda m, b: 1.0)
        for g in fd:
            if g is not None:
                assert not g.weights.any() and not g.bias.any()

    def test_exact_for_linear_loss(self):
        layer = nn.Dense(weights=np.array([[4.0]]), bias=np.zeros(1))

        def linear(layers, _):
            return 3.0 * float(layers[0].weights[0, 0])

        fd = nn.finite_difference_grad([layer], None, linear)
        np.testing.assert_allclose(fd[0].weights, [[3.0]], atol=1e-8)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            nn.finite_difference_grad([nn.Relu()], None, lambda m, b: 0.0, eps=0.0)


def test_init_determinism():
    a = nn.init_mlp([5, 4, 3], 1, np.random.default_rng(99))
    b = nn.init_mlp([5, 4, 3], 1, np.random.default_rng(99))
    np.testing.assert_array_equal(
        nn.parameter_vector(a.layers), nn.parameter_vector(b.layers)
    )
    for layer in a.layers:
        if isinstance(layer, nn.Dense):
            assert not layer.bias.any()
