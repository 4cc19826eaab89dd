import numpy as np
import pytest

from histograph import numcore as nc
from histograph.backbone import ActivationHistory, BackboneConfig
from histograph.baselines import READOUT_KINDS, canonical_readout, jk_concat, node_readout, pool_last_layer
from histograph.errors import ConfigError, ContractError
from histograph.graphdata import batch_graphs, generate_synthetic
from histograph.histopool import PoolConfig
from histograph.model import GraphModel, ModelConfig


def single(rows):
    return ActivationHistory.from_array(np.asarray(rows, dtype=np.float64)[:, None, :])


class TestPoolLastLayer:
    @pytest.mark.parametrize("kind,expected", [("mean", [2, 3]), ("sum", [4, 6]), ("max", [3, 4])])
    def test_small(self, high, kind, expected):
        out = pool_last_layer(kind, single([[1, 2], [3, 4]])).data
        np.testing.assert_array_equal(out, [expected])

    def test_uses_final_slice(self, high):
        h = ActivationHistory.from_array(np.array([[[9.0], [1.0]], [[9.0], [3.0]]]))
        assert pool_last_layer("mean", h).data.tolist() == [[2.0]]

    def test_sum_is_mean_times_count(self, high, rng):
        ids = np.array([0, 0, 0, 1, 1])
        h = ActivationHistory.from_array(rng.standard_normal((5, 2, 3)), ids)
        counts = np.bincount(ids)[:, None]
        np.testing.assert_allclose(pool_last_layer("sum", h).data, pool_last_layer("mean", h).data * counts)

    def test_empty_graph(self, high):
        h = ActivationHistory(nc.tensor(np.ones((2, 1, 2))), np.array([0, 2]), 3)
        with pytest.raises(ContractError):
            pool_last_layer("mean", h)

    def test_max_gradient(self, high, rng):
        x = nc.tensor(rng.standard_normal((5, 2, 3)), requires_grad=True)
        ids = np.array([0, 0, 1, 1, 1])
        fn = lambda x_: nc.tsum(nc.square(pool_last_layer("max", ActivationHistory(x_, ids, 2))))
        assert nc.grad_check(fn, [x]) < 1e-6


class TestJK:
    def test_single_layer_is_mean(self, high, rng):
        h = ActivationHistory.from_array(rng.standard_normal((4, 1, 3)), [0, 0, 1, 1])
        np.testing.assert_array_equal(jk_concat(h).data, pool_last_layer("mean", h).data)

    def test_width(self, high, rng):
        h = ActivationHistory.from_array(rng.standard_normal((4, 3, 4)))
        assert jk_concat(h).shape == (1, 12)

    def test_layer_order(self, high):
        data = np.array([[[1.0], [10.0], [100.0]], [[3.0], [30.0], [300.0]]])
        assert jk_concat(ActivationHistory.from_array(data)).data.tolist() == [[2.0, 20.0, 200.0]]


def readout(kind, data):
    h = ActivationHistory.from_array(data)
    return jk_concat(h) if kind == "jk_concat" else pool_last_layer(kind, h)


@pytest.mark.parametrize("kind", ["mean", "sum", "max", "jk_concat"])
def test_permutation_invariance(kind, high, rng):
    data = rng.standard_normal((6, 3, 4))
    perm = rng.permutation(6)
    np.testing.assert_allclose(readout(kind, data).data, readout(kind, data[perm]).data, rtol=0, atol=1e-12)


def test_node_readout(high, rng):
    h = ActivationHistory.from_array(rng.standard_normal((4, 3, 2)))
    np.testing.assert_array_equal(node_readout("mean", h).data, h.tensor.data[:, 2])
    assert node_readout("jk", h).shape == (4, 6)


def test_dispatch_is_total():
    assert canonical_readout("jk") == "jk_concat"
    with pytest.raises(ConfigError):
        canonical_readout("set2set")


@pytest.mark.parametrize("readout", READOUT_KINDS)
@pytest.mark.parametrize("task", ["graph_class", "node_class"])
def test_model_every_readout(readout, task):
    gs = generate_synthetic("community_classes", {"num_graphs": 3, "n": 5}, seed=0)
    cfg = ModelConfig(BackboneConfig("gcn", 3, 2, 8), PoolConfig(hidden=8, heads=2), readout, task, 2)
    logits = GraphModel(cfg, seed=1)(batch_graphs(gs))
    rows = 3 if task == "graph_class" else 15
    assert logits.shape == (rows, 2)
    assert np.all(np.isfinite(logits.data))


def test_model_config_roundtrip():
    cfg = ModelConfig(BackboneConfig("gin", 4, 3, 16), PoolConfig(hidden=16, heads=4), "jk", "node_class", 3)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.readout == "jk_concat" and again.pool.task_mode == "node"


def test_mean_path_with_projection_width():
    """When pool width differs from backbone width, the mix uses the projected last layer."""
    gs = generate_synthetic("community_classes", {"num_graphs": 2, "n": 4}, seed=0)
    cfg = ModelConfig(BackboneConfig("gcn", 3, 2, 6), PoolConfig(hidden=8, heads=2), "histograph", "graph_class", 2)
    logits = GraphModel(cfg, seed=0)(batch_graphs(gs))
    assert logits.shape == (2, 2)
