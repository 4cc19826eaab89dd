import numpy as np
import pytest

from histograph import numcore as nc
from histograph.backbone import (ActivationHistory, BackboneConfig, forward_with_history, gcn_layer, gin_layer,
                                 init_backbone_params, input_embed)
from histograph.errors import ConfigError, ShapeError
from histograph.graphdata import Graph, batch_graphs, generate_synthetic, normalized_adjacency, sum_adjacency


def t(x, grad=False):
    return nc.tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def identity_mlp(d):
    return {"mlp1.weight": t(np.eye(d)), "mlp1.bias": t(np.zeros(d)),
            "mlp2.weight": t(np.eye(d)), "mlp2.bias": t(np.zeros(d))}


class TestInputEmbed:
    def test_identity(self, high, rng):
        f = rng.standard_normal((4, 3))
        np.testing.assert_array_equal(input_embed(t(f), t(np.eye(3)), t(np.zeros(3))).data, f)

    def test_zero_weights_give_bias(self, high):
        out = input_embed(t(np.ones((3, 2))), t(np.zeros((2, 4))), t([1.0, 2.0, 3.0, 4.0])).data
        np.testing.assert_array_equal(out, np.tile([1.0, 2.0, 3.0, 4.0], (3, 1)))

    def test_width_mismatch(self, high):
        with pytest.raises(ShapeError):
            input_embed(t(np.ones((3, 2))), t(np.zeros((3, 4))), t(np.zeros(4)))

    def test_gradient(self, high, rng):
        f = t(rng.standard_normal((4, 3)), grad=True)
        w = t(rng.standard_normal((3, 2)), grad=True)
        b = t(rng.standard_normal(2), grad=True)
        assert nc.grad_check(lambda *a: nc.tsum(nc.square(input_embed(*a))), [f, w, b]) < 1e-6


class TestGCN:
    def test_two_connected(self, high):
        g = Graph(2, [(0, 1)], np.ones((2, 1)))
        out = gcn_layer(t(np.eye(2)), normalized_adjacency(g).to_csr(), t(np.eye(2))).data
        np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5]])

    def test_isolated_node(self, high):
        g = Graph(1, [], np.ones((1, 1)))
        x, w = np.array([[1.0, -2.0]]), np.array([[1.0, 0.5], [0.0, 1.0]])
        out = gcn_layer(t(x), normalized_adjacency(g).to_csr(), t(w)).data
        np.testing.assert_allclose(out, np.maximum(x @ w, 0))

    def test_repeated_application_oversmooths(self, high):
        g = generate_synthetic("community_classes", {"num_graphs": 2, "n": 10}, seed=4)[0]
        adj = normalized_adjacency(g).to_csr()
        rng = np.random.default_rng(0)
        w = rng.standard_normal((8, 8))
        w *= 0.9 / np.linalg.norm(w, 2)
        x = t(rng.standard_normal((10, 8)))
        spread0 = np.linalg.norm(x.data - x.data.mean(0))
        for _ in range(64):
            x = gcn_layer(x, adj, t(w), activation=lambda v: v)
        assert np.linalg.norm(x.data - x.data.mean(0)) < 1e-3 * spread0

    def test_gradient(self, high, rng):
        g = generate_synthetic("community_classes", {"num_graphs": 2, "n": 5}, seed=1)[0]
        adj = normalized_adjacency(g).to_csr()
        x = t(rng.standard_normal((5, 3)), grad=True)
        w = t(rng.standard_normal((3, 3)), grad=True)
        assert nc.grad_check(lambda a, b: nc.tsum(nc.square(gcn_layer(a, adj, b, nc.tanh))), [x, w]) < 1e-6


class TestGIN:
    def test_isolated_node_unchanged(self, high):
        g = Graph(1, [], np.ones((1, 1)))
        x = np.array([[0.3, 1.2]])
        out = gin_layer(t(x), g, t(0.0), identity_mlp(2)).data
        np.testing.assert_allclose(out, x)

    def test_one_neighbor_sums(self, high):
        g = Graph(2, [(0, 1)], np.ones((2, 1)))
        x = np.array([[0.3, 1.2], [2.0, 0.5]])
        out = gin_layer(t(x), g, t(0.0), identity_mlp(2)).data
        np.testing.assert_allclose(out[0], x[0] + x[1])

    def test_gradient(self, high, rng):
        g = generate_synthetic("community_classes", {"num_graphs": 2, "n": 5}, seed=2)[0]
        adj = sum_adjacency(g)
        x = t(rng.standard_normal((5, 3)), grad=True)
        eps = t(0.1, grad=True)
        mlp = {k: t(rng.standard_normal(v.shape), grad=True) for k, v in identity_mlp(3).items()}
        names = list(mlp)

        def fn(x_, e_, *ws):
            return nc.tsum(nc.square(gin_layer(x_, adj, e_, dict(zip(names, ws)), nc.tanh)))

        assert nc.grad_check(fn, [x, eps, *mlp.values()]) < 1e-4


class TestForwardWithHistory:
    def setup_batch(self, count=3):
        return batch_graphs(generate_synthetic("community_classes", {"num_graphs": count, "n": 6}, seed=0)[:count])

    @pytest.mark.parametrize("kind", ["gcn", "gin"])
    def test_shape(self, kind, high):
        b = self.setup_batch()
        cfg = BackboneConfig(kind, 4, 2, 8)
        hist = forward_with_history(b, init_backbone_params(cfg, np.random.default_rng(0)), cfg)
        assert hist.tensor.shape == (18, 4, 8)
        assert hist.num_graphs == 3

    def test_single_layer_is_embedding(self, high):
        b = self.setup_batch()
        cfg = BackboneConfig("gcn", 1, 2, 8)
        p = init_backbone_params(cfg, np.random.default_rng(0))
        hist = forward_with_history(b, p, cfg)
        assert hist.tensor.shape == (18, 1, 8)
        emb = input_embed(nc.tensor(b.features), p["backbone.embed.weight"], p["backbone.embed.bias"])
        np.testing.assert_array_equal(hist.layer(0).data, emb.data)

    @pytest.mark.parametrize("kind", ["gcn", "gin"])
    def test_compositional(self, kind, high):
        b = self.setup_batch()
        cfg = BackboneConfig(kind, 4, 2, 8)
        p = init_backbone_params(cfg, np.random.default_rng(0))
        hist = forward_with_history(b, p, cfg).tensor.data
        x = nc.tensor(hist[:, 0, :])
        for layer in range(1, 4):
            pre = f"backbone.layers.{layer}."
            if kind == "gcn":
                x = gcn_layer(x, b.gcn_adjacency, p[pre + "weight"])
            else:
                mlp = {k: p[pre + k] for k in identity_mlp(1)}
                x = gin_layer(x, b.neighbor_sum, p[pre + "eps"], mlp)
            np.testing.assert_array_equal(x.data, hist[:, layer, :])

    def test_slice_zero_independent_of_depth(self, high):
        b = self.setup_batch()
        outs = []
        for depth in (2, 5):
            cfg = BackboneConfig("gin", depth, 2, 8)
            outs.append(forward_with_history(b, init_backbone_params(cfg, np.random.default_rng(0)), cfg))
        np.testing.assert_array_equal(outs[0].layer(0).data, outs[1].layer(0).data)

    def test_equivariance(self, high):
        gs = generate_synthetic("community_classes", {"num_graphs": 2, "n": 7}, seed=3)
        perm = np.random.default_rng(1).permutation(7)
        cfg = BackboneConfig("gcn", 3, 2, 6)
        p = init_backbone_params(cfg, np.random.default_rng(0))
        base = forward_with_history(batch_graphs(gs), p, cfg).tensor.data
        moved = forward_with_history(batch_graphs([gs[0], gs[1].permuted(perm)]), p, cfg).tensor.data
        np.testing.assert_allclose(moved[7:], base[7:][perm], atol=1e-12)
        np.testing.assert_array_equal(moved[:7], base[:7])

    def test_history_is_finite(self):
        b = self.setup_batch()
        cfg = BackboneConfig("gin", 5, 2, 16)
        hist = forward_with_history(b, init_backbone_params(cfg, np.random.default_rng(0)), cfg)
        assert np.all(np.isfinite(hist.tensor.data))


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig("gat")
    with pytest.raises(ConfigError):
        BackboneConfig("gcn", 0)


def test_from_array_infers_graph_count():
    h = ActivationHistory.from_array(np.zeros((5, 2, 3)), [0, 0, 1, 1, 2])
    assert h.num_graphs == 3 and h.num_layers == 2 and h.width == 3
    assert h.offsets.tolist() == [0, 2, 4, 5]
