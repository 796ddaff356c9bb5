"""Finite-difference verification of every hand-written backward pass.

Each check projects the op output onto a fixed random tensor to get a
scalar, compares the analytic gradient against 64-bit central differences,
and demands relative error below 1e-3.
"""

import numpy as np
import pytest

from mvfcn import (
    BatchNormState,
    ConvSpec,
    EngineRng,
    TransposeConvSpec,
    backward,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    convT2d_backward,
    convT2d_forward,
    dropout,
    dropout_backward,
    forward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
)
from mvfcn.train import bce_loss

from conftest import numerical_grad, rel_err, tiny_graph, to_float64

TOL = 1e-3
SEEDS = range(6)


class TestConvGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    @pytest.mark.parametrize("k,s", [(1, 1), (3, 1), (3, 2), (5, 4)])
    def test_conv_matches_fd(self, seed, k, s):
        r = np.random.default_rng(seed)
        spec = ConvSpec(k, s, 2, 3)
        x = r.normal(size=(2, 2, 6, 6))
        w = r.normal(size=spec.weight_shape())
        b = r.normal(size=3)
        proj = r.normal(size=conv2d_forward(x, w, b, spec).shape)

        def loss(x=x, w=w, b=b):
            return float((conv2d_forward(x, w, b, spec) * proj).sum())

        d_x, d_w, d_b = conv2d_backward(x, w, spec, proj)
        assert rel_err(d_x, numerical_grad(lambda v: loss(x=v), x)) < TOL
        assert rel_err(d_w, numerical_grad(lambda v: loss(w=v), w)) < TOL
        assert rel_err(d_b, numerical_grad(lambda v: loss(b=v), b)) < TOL

    def test_zero_upstream_gives_zero(self):
        spec = ConvSpec(3, 2, 2, 2)
        x = np.random.default_rng(0).normal(size=(1, 2, 6, 6))
        w = np.random.default_rng(1).normal(size=spec.weight_shape())
        d_x, d_w, d_b = conv2d_backward(x, w, spec, np.zeros((1, 2, 3, 3)))
        assert not d_x.any() and not d_w.any() and not d_b.any()

    def test_scalar_chain_rule(self):
        # 1x1 identity kernel on a single pixel: d_x = 1, d_w = input value
        spec = ConvSpec(1, 1, 1, 1)
        x = np.array([[[[2.75]]]])
        w = np.ones((1, 1, 1, 1))
        d_x, d_w, _ = conv2d_backward(x, w, spec, np.ones((1, 1, 1, 1)))
        assert d_x[0, 0, 0, 0] == 1.0
        assert d_w[0, 0, 0, 0] == 2.75

    def test_upstream_shape_mismatch_rejected(self):
        from mvfcn import ShapeError
        spec = ConvSpec(3, 2, 1, 1)
        x = np.zeros((1, 1, 6, 6))
        w = np.zeros(spec.weight_shape())
        with pytest.raises(ShapeError):
            conv2d_backward(x, w, spec, np.zeros((1, 1, 6, 6)))


class TestTransposeConvGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_convT_matches_fd(self, seed):
        r = np.random.default_rng(100 + seed)
        spec = TransposeConvSpec(3, 2, 2, 3)
        x = r.normal(size=(1, 2, 3, 4))
        w = r.normal(size=spec.weight_shape())
        b = r.normal(size=3)
        proj = r.normal(size=(1, 3, 6, 8))

        def loss(x=x, w=w, b=b):
            return float((convT2d_forward(x, w, b, spec) * proj).sum())

        d_x, d_w, d_b = convT2d_backward(x, w, spec, proj)
        assert rel_err(d_x, numerical_grad(lambda v: loss(x=v), x)) < TOL
        assert rel_err(d_w, numerical_grad(lambda v: loss(w=v), w)) < TOL
        assert rel_err(d_b, numerical_grad(lambda v: loss(b=v), b)) < TOL

    def test_zero_upstream_gives_zero(self):
        spec = TransposeConvSpec(3, 2, 2, 2)
        x = np.random.default_rng(2).normal(size=(1, 2, 4, 4))
        w = np.random.default_rng(3).normal(size=spec.weight_shape())
        d_x, d_w, d_b = convT2d_backward(x, w, spec, np.zeros((1, 2, 8, 8)))
        assert not d_x.any() and not d_w.any() and not d_b.any()

    def test_dx_is_forward_conv_of_upstream(self):
        r = np.random.default_rng(4)
        spec = TransposeConvSpec(3, 2, 4, 3)
        x = r.normal(size=(2, 4, 5, 6))
        w = r.normal(size=spec.weight_shape())
        d_out = r.normal(size=(2, 3, 10, 12))
        d_x, _, _ = convT2d_backward(x, w, spec, d_out)
        ref = conv2d_forward(d_out, w, None, ConvSpec(3, 2, 3, 4))
        assert np.allclose(d_x, ref, atol=1e-12)


class TestAdjointIdentity:
    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("k,s", [(1, 1), (3, 2), (5, 4), (9, 8), (5, 2), (9, 1)])
    def test_inner_products_agree(self, seed, k, s):
        r = np.random.default_rng(seed * 97 + k * 10 + s)
        cin, cout = int(r.integers(1, 4)), int(r.integers(1, 4))
        h, w = int(r.integers(k, k + 9)), int(r.integers(k, k + 9))
        spec = ConvSpec(k, s, cin, cout)
        tspec = TransposeConvSpec(k, s, cout, cin)
        x = r.normal(size=(2, cin, h, w))
        weight = r.normal(size=spec.weight_shape())
        y = r.normal(size=conv2d_forward(x, weight, None, spec).shape)
        lhs = float((conv2d_forward(x, weight, None, spec) * y).sum())
        rhs = float((x * convT2d_forward(y, weight, None, tspec, out_hw=(h, w))).sum())
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs), abs(rhs))


class TestActivationGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu_matches_fd_away_from_kink(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(3, 5))
        x[np.abs(x) < 1e-4] = 0.5  # exclude the kink
        proj = r.normal(size=x.shape)
        analytic = relu_backward(proj, x)
        fd = numerical_grad(lambda v: float((relu(v) * proj).sum()), x)
        assert rel_err(analytic, fd) < TOL

    def test_relu_all_negative_zero_grad(self):
        x = -np.abs(np.random.default_rng(0).normal(size=(4, 4))) - 0.1
        assert not relu_backward(np.ones_like(x), x).any()

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sigmoid_matches_fd(self, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(3, 5))
        proj = r.normal(size=x.shape)
        analytic = sigmoid_backward(proj, sigmoid(x))
        fd = numerical_grad(lambda v: float((sigmoid(v) * proj).sum()), x)
        assert rel_err(analytic, fd) < TOL


class TestBatchNormGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_matches_fd(self, seed):
        r = np.random.default_rng(200 + seed)
        x = r.normal(1.0, 2.0, size=(2, 3, 4, 4))
        gamma = r.normal(1.0, 0.2, size=3)
        beta = r.normal(size=3)
        proj = r.normal(size=x.shape)

        def loss(x=x, gamma=gamma, beta=beta):
            state = BatchNormState(gamma=gamma, beta=beta,
                                   running_mean=np.zeros(3), running_var=np.ones(3))
            y, _ = batchnorm_forward(x, state, "train")
            return float((y * proj).sum())

        state = BatchNormState(gamma=gamma, beta=beta,
                               running_mean=np.zeros(3), running_var=np.ones(3))
        _, cache = batchnorm_forward(x, state, "train")
        d_x, d_gamma, d_beta = batchnorm_backward(proj, state, cache)
        assert rel_err(d_x, numerical_grad(lambda v: loss(x=v), x)) < TOL
        assert rel_err(d_gamma, numerical_grad(lambda v: loss(gamma=v), gamma)) < TOL
        assert rel_err(d_beta, numerical_grad(lambda v: loss(beta=v), beta)) < TOL


class TestDropoutGradient:
    def test_fixed_mask_is_linear(self, rng):
        x = np.random.default_rng(0).normal(size=(2, 2, 4, 4))
        y, mask = dropout(x, 0.3, rng, "train")
        proj = np.random.default_rng(1).normal(size=x.shape)
        d_x = dropout_backward(proj, mask, 0.3)
        fd = numerical_grad(
            lambda v: float((v * (mask / 0.7) * proj).sum()), x)
        assert rel_err(d_x, fd) < TOL


class TestLossGradient:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_bce_matches_fd(self, seed):
        r = np.random.default_rng(300 + seed)
        logits = r.normal(size=(2, 1, 3, 3))
        target = r.uniform(size=logits.shape)
        _, d_logits = bce_loss(logits, target)
        fd = numerical_grad(lambda v: bce_loss(v, target)[0], logits)
        assert rel_err(d_logits, fd) < 1e-4


class TestGraphGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_three_layer_end_to_end(self, seed):
        graph = to_float64(_init_graph(tiny_graph(), seed))
        r = np.random.default_rng(400 + seed)
        x = r.uniform(size=(2, 2, 6, 6))
        target = (r.uniform(size=(2, 1, 6, 6)) > 0.5).astype(np.float64)
        rng = EngineRng(seed)

        _, cache = forward(graph, x, mode="train", rng=rng)
        _, d_logits = bce_loss(cache.logits, target)
        grads = backward(graph, cache, d_logits)

        for lid in (2, 3, 4):
            for name in ("weight", "bias"):
                param = graph.params[lid][name]

                def loss(values, lid=lid, name=name, param=param):
                    saved = param.copy()
                    np.copyto(param, values)
                    _, c = forward(graph, x, mode="train", rng=EngineRng(seed))
                    np.copyto(param, saved)
                    return bce_loss(c.logits, target)[0]

                fd = numerical_grad(loss, param)
                assert rel_err(grads[lid][name], fd) < TOL, (lid, name)

    def test_zero_upstream_gives_zero_everywhere(self):
        graph = _init_graph(tiny_graph(), 0)
        rng = EngineRng(0)
        x = np.random.default_rng(1).uniform(size=(1, 2, 4, 4)).astype(np.float32)
        _, cache = forward(graph, x, mode="train", rng=rng)
        grads = backward(graph, cache, np.zeros((1, 1, 4, 4), np.float32))
        for lid, per in grads.items():
            for name, g in per.items():
                assert not g.any(), (lid, name)

    def test_gradient_shapes_match_parameters(self):
        from mvfcn import build_mvfcn
        graph = build_mvfcn()
        graph.initialize_parameters(EngineRng(0))
        rng = EngineRng(1)
        x = np.random.default_rng(2).uniform(size=(1, 3, 32, 32)).astype(np.float32)
        _, cache = forward(graph, x, mode="train", rng=rng)
        grads = backward(graph, cache, np.ones((1, 1, 32, 32), np.float32))
        for lid, name, param in graph.parameter_items():
            assert grads[lid][name].shape == param.shape


def _init_graph(graph, seed):
    graph.initialize_parameters(EngineRng(seed))
    return graph
