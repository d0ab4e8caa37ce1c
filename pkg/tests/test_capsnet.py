import math

import numpy as np
import pytest

from kcn.capsnet import (
    CapsNet,
    CapsNetConfig,
    ConfigError,
    ConvSpec,
    RoutingState,
    capsule_lengths,
    dynamic_routing,
    margin_loss,
    squash,
)
from kcn.diffcore import ComputeGraph, Tensor, finite_diff_check, ops, parameter


def _tiny_config(**overrides):
    cfg = CapsNetConfig(image_shape=(1, 6, 6), stem=(ConvSpec(1, 2, 3, 1, 0),),
                        capsule_conv=ConvSpec(2, 2, 2, 2, 0), num_primary_convs=4,
                        num_classes=3, capsule_dim=4, init_std=0.5)
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def _routing_oracle(u_hat, iterations):
    """Straight-line transcription of routing by agreement for one example, scalar loops only."""
    n_primary, n_classes, k = len(u_hat), len(u_hat[0]), len(u_hat[0][0])
    b = [[0.0] * n_classes for _ in range(n_primary)]
    v = None
    for it in range(iterations):
        c = []
        for i in range(n_primary):
            top = max(b[i])
            e = [math.exp(x - top) for x in b[i]]
            c.append([x / sum(e) for x in e])
        v = []
        for j in range(n_classes):
            s = [sum(c[i][j] * u_hat[i][j][d] for i in range(n_primary)) for d in range(k)]
            sq = sum(x * x for x in s)
            scale = sq / (1.0 + sq) / math.sqrt(sq + 1e-9)
            v.append([x * scale for x in s])
        if it < iterations - 1:
            for i in range(n_primary):
                for j in range(n_classes):
                    b[i][j] += sum(u_hat[i][j][d] * v[j][d] for d in range(k))
    return np.array(v)


class TestConvSpec:
    def test_mnist_feature_shapes(self):
        assert CapsNetConfig().feature_shapes() == [(12, 16, 16), (16, 8, 8), (32, 1, 1)]

    def test_mnist_primary_count(self):
        cfg = CapsNetConfig()
        assert cfg.num_primary_capsules == 32 and cfg.feature_dim == 160

    def test_color_feature_shapes(self):
        assert CapsNetConfig.for_dataset("cifar10").feature_shapes()[-1] == (32, 1, 1)

    def test_spatial_underflow(self):
        with pytest.raises(ConfigError):
            ConvSpec(1, 1, 9, 1, 0).output_size(4)

    def test_channel_chain_checked(self):
        with pytest.raises(ConfigError):
            CapsNetConfig(stem=(ConvSpec(1, 12, 4, 2, 3), ConvSpec(8, 16, 3, 2, 1))).feature_shapes()

    def test_invalid_stride(self):
        with pytest.raises(ConfigError):
            ConvSpec(1, 1, 3, 0, 0)


class TestSquash:
    def test_zero(self):
        np.testing.assert_array_equal(squash(np.zeros(8)).data, np.zeros(8))

    @pytest.mark.parametrize("norm,expected", [(1.0, 0.5), (1000.0, 1e6 / (1 + 1e6))])
    def test_norm(self, norm, expected):
        s = np.zeros(5)
        s[2] = norm
        out = squash(s).data
        assert np.linalg.norm(out) == pytest.approx(expected, rel=1e-9)
        assert np.linalg.norm(out) < 1.0

    def test_direction_and_range(self, rng):
        s = rng.normal(scale=3.0, size=(50, 7))
        out = squash(s).data
        cos = np.sum(out * s, axis=1) / (np.linalg.norm(out, axis=1) * np.linalg.norm(s, axis=1))
        np.testing.assert_allclose(cos, 1.0, atol=1e-12)
        assert np.all(np.linalg.norm(out, axis=1) < 1.0)


class TestRouting:
    def test_single_iteration_is_uniform_average(self, rng):
        u = rng.normal(size=(2, 5, 3, 4))
        v = dynamic_routing(Tensor(u), iterations=1).data
        np.testing.assert_allclose(v, squash(u.sum(axis=1) / 3).data, atol=1e-12)

    @pytest.mark.parametrize("unrolled", [False, True])
    def test_matches_scalar_oracle(self, unrolled):
        rng = np.random.default_rng(7)
        u = rng.normal(size=(1, 3, 2, 2))
        v = dynamic_routing(Tensor(u), iterations=3, unrolled=unrolled).data[0]
        np.testing.assert_allclose(v, _routing_oracle(u[0].tolist(), 3), atol=1e-12)

    def test_couplings_sum_to_one(self):
        for seed in range(20):
            r = np.random.default_rng(seed)
            state = RoutingState(logits=None)
            dynamic_routing(Tensor(r.normal(scale=2.0, size=(3, int(r.integers(1, 9)), 4, 5))), 3, state=state)
            assert len(state.couplings) == 3
            for c in state.couplings:
                np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-6)
                assert c.min() >= 0.0 and c.max() <= 1.0

    def test_single_primary(self, rng):
        state = RoutingState(logits=None)
        dynamic_routing(Tensor(rng.normal(size=(1, 1, 4, 3))), 3, state=state)
        for c in state.couplings:
            np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-12)

    @pytest.mark.parametrize("iterations", range(1, 11))
    def test_many_iterations_stay_finite(self, iterations, rng):
        v = dynamic_routing(Tensor(rng.normal(scale=5.0, size=(2, 6, 3, 4))), iterations).data
        assert np.all(np.isfinite(v))
        assert np.all(np.linalg.norm(v, axis=-1) < 1.0)

    def test_zero_iterations_rejected(self):
        with pytest.raises(ValueError):
            dynamic_routing(Tensor(np.zeros((1, 2, 2, 2))), 0)

    def test_detached_and_unrolled_agree_on_values(self, rng):
        u = Tensor(rng.normal(size=(2, 4, 3, 2)))
        np.testing.assert_allclose(dynamic_routing(u, 3).data, dynamic_routing(u, 3, unrolled=True).data,
                                   atol=1e-12)


class TestCapsNet:
    def test_mnist_shapes_and_norms(self, rng):
        net = CapsNet(CapsNetConfig(init_std=None), rng)
        x = rng.normal(size=(2, 1, 28, 28))
        assert net.conv_stem(Tensor(x)).shape == (2, 16, 8, 8)
        prim = net.primary_capsules(net.conv_stem(Tensor(x)))
        assert prim.shape == (2, 32, 8)
        assert np.all(np.linalg.norm(prim.data, axis=-1) < 1.0)
        caps = net(x)
        assert caps.shape == (2, 10, 16)
        assert np.all(np.linalg.norm(caps.data, axis=-1) < 1.0)

    def test_zero_image_zero_features(self, rng):
        net = CapsNet(CapsNetConfig(), rng)
        feats = net.conv_stem(Tensor(np.zeros((1, 1, 28, 28))))
        np.testing.assert_array_equal(feats.data, 0.0)
        np.testing.assert_array_equal(net.primary_capsules(feats).data, 0.0)

    def test_identity_conv_stem(self, rng):
        cfg = CapsNetConfig(image_shape=(1, 5, 5), stem=(ConvSpec(1, 1, 1, 1, 0),),
                            capsule_conv=ConvSpec(1, 2, 5, 1, 0), num_primary_convs=2, num_classes=2, capsule_dim=2)
        net = CapsNet(cfg, rng)
        net.stem_weights[0].data[...] = 1.0
        x = rng.normal(size=(1, 1, 5, 5))
        np.testing.assert_array_equal(net.conv_stem(Tensor(x)).data, x)

    def test_deterministic(self, rng):
        net = CapsNet(CapsNetConfig(init_std=None), rng)
        x = rng.normal(size=(1, 1, 28, 28))
        batch = np.concatenate([x, x])
        out = net(batch).data
        np.testing.assert_array_equal(out[0], out[1])
        np.testing.assert_array_equal(net(x).data, net(x).data)
        np.testing.assert_allclose(net(x).data[0], out[0], atol=1e-12)

    def test_one_pixel_shift_changes_norms_boundedly(self, rng):
        net = CapsNet(CapsNetConfig(init_std=None), rng)
        x = np.zeros((1, 1, 28, 28))
        x[0, 0, 8:20, 10:18] = rng.random((12, 8))
        shifted = np.roll(x, 1, axis=3)
        delta = capsule_lengths(net(x)).data - capsule_lengths(net(shifted)).data
        assert np.all(np.abs(delta) < 1.0)

    @pytest.mark.parametrize("param", ["stem_w", "prim_w", "prim_b", "routing"])
    def test_margin_loss_gradient_through_network(self, param):
        rng = np.random.default_rng(11)
        net = CapsNet(_tiny_config(unrolled_routing=True), rng)
        params = {"stem_w": net.stem_weights[0], "prim_w": net.primary_weight,
                  "prim_b": net.primary_bias, "routing": net.routing_weight}
        net.primary_bias.data = rng.normal(scale=0.3, size=net.primary_bias.shape)
        labels = np.array([0, 2])
        graph = ComputeGraph(lambda p, i: {"loss": ops.sum(margin_loss(net(i["x"]), labels))}, params)
        graph.forward({"x": rng.normal(size=(2, 1, 6, 6))})
        result = finite_diff_check(graph, param, tolerance=1e-4, max_entries=40)
        assert result.passed, result

    def test_detached_routing_gradient_matches_frozen_couplings(self):
        # with detached routing, the gradient equals that of a graph where c is a constant
        rng = np.random.default_rng(3)
        u = rng.normal(size=(1, 4, 3, 2))
        state = RoutingState(logits=None)
        dynamic_routing(Tensor(u), 3, state=state)
        c = state.couplings[-1]
        w = rng.normal(size=(1, 3, 2))
        a = parameter(u.copy())
        ops.sum(dynamic_routing(a, 3) * Tensor(w)).backward()
        b = parameter(u.copy())
        ops.sum(squash(ops.sum(Tensor(c[..., None]) * b, axis=1)) * Tensor(w)).backward()
        np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)


class TestMarginLoss:
    def _caps(self, norms, k=4):
        caps = np.zeros((1, len(norms), k))
        caps[0, :, 0] = norms
        return Tensor(caps)

    def test_both_hinges_inactive(self):
        norms = [0.1] * 10
        norms[3] = 0.9
        assert margin_loss(self._caps(norms), [3]).data[0] == pytest.approx(0.0, abs=1e-9)

    def test_all_zero(self):
        assert margin_loss(self._caps([0.0] * 10), [0]).data[0] == pytest.approx(0.81, abs=1e-9)

    def test_all_unit(self):
        assert margin_loss(self._caps([1.0] * 10), [5]).data[0] == pytest.approx(3.645, abs=1e-9)

    @pytest.mark.parametrize("label", [-1, 10])
    def test_label_out_of_range(self, label):
        with pytest.raises(ValueError):
            margin_loss(self._caps([0.5] * 10), [label])
