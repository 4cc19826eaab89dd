import hashlib
import math
import warnings

import numpy as np
import pytest

from histograph import numcore as nc
from histograph.errors import ConfigError, ContractError, DivergenceError
from histograph.graphdata import batch_graphs, generate_synthetic
from histograph.numcore import ParamStore
from histograph.trainer import (Checkpoint, MaskedBatchWarning, TrainConfig, cache_activations, evaluate,
                                finetune_head, model_from_checkpoint, train)
from histograph.trainer.losses import accuracy, cross_entropy, masked_bce, mse, roc_auc
from histograph.trainer.loop import make_split, stack_cached
from histograph.trainer.optim import Adam, AdamHyper, adam_step


@pytest.fixture(scope="module")
def community():
    return generate_synthetic("community_classes", {}, seed=0)


def strip_timing(metrics):
    return [{k: v for k, v in r.items() if k != "epoch_time"} for r in metrics]


class TestLosses:
    @pytest.mark.parametrize("k", [2, 3, 7])
    def test_uniform_logits_give_log_k(self, high, k):
        loss = cross_entropy(nc.tensor(np.zeros((5, k))), np.arange(5) % k)
        assert loss.item() == pytest.approx(math.log(k), rel=1e-14)

    def test_confident_correct_prediction(self, high):
        logits = np.full((4, 3), -10.0)
        logits[np.arange(4), [0, 2, 1, 0]] = 10.0
        assert cross_entropy(nc.tensor(logits), [0, 2, 1, 0]).item() < 1e-3

    def test_mse_exact(self, high):
        assert mse(nc.tensor([[1.5], [-2.0]]), [[1.5], [-2.0]]).item() == 0.0
        assert mse(nc.tensor([[1.0], [3.0]]), [[0.0], [0.0]]).item() == 5.0

    def test_masked_bce_all_masked(self, high):
        logits = nc.tensor(np.ones((2, 3)), requires_grad=True)
        with pytest.warns(MaskedBatchWarning):
            loss = masked_bce(logits, np.full((2, 3), np.nan))
        assert loss.item() == 0.0
        nc.backward(loss)
        np.testing.assert_array_equal(logits.grad, 0.0)

    def test_masked_bce_ignores_nan(self, high):
        z = np.array([[0.3, -1.0]])
        full = masked_bce(nc.tensor(z[:, :1]), [[1.0]]).item()
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            part = masked_bce(nc.tensor(z), [[1.0, np.nan]]).item()
        assert part == pytest.approx(full, rel=1e-15)
        assert full == pytest.approx(math.log1p(math.exp(-0.3)), rel=1e-15)

    def test_loss_gradients(self, high, rng):
        z = nc.tensor(rng.standard_normal((6, 3)), requires_grad=True)
        y = rng.integers(0, 3, 6)
        assert nc.grad_check(lambda a: cross_entropy(a, y), [z]) < 1e-6
        t = np.where(rng.random((6, 3)) < 0.3, np.nan, rng.integers(0, 2, (6, 3)).astype(float))
        assert nc.grad_check(lambda a: masked_bce(a, t), [z]) < 1e-6


class TestMetrics:
    def test_accuracy(self):
        assert accuracy(np.eye(3), [0, 1, 2]) == 1.0
        assert accuracy(np.eye(3), [1, 1, 1]) == pytest.approx(1 / 3)

    def test_roc_auc_perfect_and_inverted(self):
        assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_roc_auc_ties(self):
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5

    def test_roc_auc_random_scores(self):
        rng = np.random.default_rng(7)
        assert abs(roc_auc(rng.random(200), rng.integers(0, 2, 200)) - 0.5) <= 0.1

    def test_roc_auc_one_class(self):
        assert math.isnan(roc_auc([0.1, 0.2], [1, 1]))


class TestAdam:
    def test_first_step_is_lr(self):
        p, _ = adam_step(np.array([1.0, -2.0]), np.array([0.3, -40.0]), {}, AdamHyper(lr=0.01))
        np.testing.assert_allclose(p, [0.99, -1.99], rtol=0, atol=1e-9)

    def test_zero_gradient_is_noop(self):
        p, state = adam_step(np.array([1.0, 2.0]), np.zeros(2), {}, AdamHyper(lr=0.1))
        np.testing.assert_array_equal(p, [1.0, 2.0])
        assert state["t"] == 1

    def test_quadratic_oracle(self):
        # scalar Adam recurrence on (x-3)^2 from 0 at lr=0.05, evaluated independently in plain Python
        x, state, hyper = np.array([0.0]), {}, AdamHyper(lr=0.05)
        first = None
        for step in range(1, 501):
            x, state = adam_step(x, 2 * (x - 3.0), state, hyper)
            if first is None and abs(x[0] - 3.0) < 1e-3:
                first = step
        assert first == 121
        assert x[0] == pytest.approx(2.9999999999609783, abs=1e-12)

    def test_nonfinite_gradient_skips_step(self, high):
        store = ParamStore()
        w = store.add("w", np.ones(2))
        b = store.add("b", np.ones(1))
        opt = Adam(store, lr=0.1)
        w.grad, b.grad = np.array([np.nan, 1.0]), np.array([1.0])
        assert opt.step() is False and opt.skipped == 1
        np.testing.assert_array_equal(w.data, [1.0, 1.0])
        np.testing.assert_array_equal(b.data, [1.0])

    def test_frozen_params_untouched(self, high):
        store = ParamStore()
        w = store.add("backbone.w", np.ones(2))
        h = store.add("head.w", np.ones(2))
        store.freeze("backbone.")
        opt = Adam(store, lr=0.1)
        w.grad = h.grad = np.ones(2)
        opt.step()
        np.testing.assert_array_equal(w.data, [1.0, 1.0])
        assert np.all(h.data < 1.0)


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"epochs": 0}, {"task": "link"}, {"mode": "frozen"},
                                        {"mode": "ft_frozen"}, {"val_fraction": 1.0}, {"precision": "half"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_roundtrip(self):
        cfg = TrainConfig(epochs=3, pool={"heads": 2, "layer_weighting": "raw"})
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.pool.layer_weighting == "raw"

    def test_model_config_uses_hidden_width(self):
        mcfg = TrainConfig(hidden=16).model_config(3, 2)
        assert mcfg.pool.hidden == 16 and mcfg.backbone.hidden == 16


class TestSplit:
    def test_graph_split(self, community):
        s = make_split(community, "graph_class", 0.2, seed=0)
        assert len(s.val_graphs) == 8 and len(s.train_graphs) == 32
        assert not set(s.val_graphs) & set(s.train_graphs)
        assert make_split(community, "graph_class", 0.2, seed=0) == s

    def test_node_split_covers_each_node_once(self):
        gs = generate_synthetic("barbell", {"n": 5, "num_graphs": 3}, seed=0)
        s = make_split(gs, "node_regress", 0.2, seed=1)
        for t, v in zip(s.train_masks, s.val_masks):
            assert np.all(t ^ v)
        assert sum(int(v.sum()) for v in s.val_masks) == 6


class TestTraining:
    def test_deterministic_metrics(self, community):
        cfg = TrainConfig(epochs=3, batch_size=8, backbone="gcn", layers=3, hidden=16, seed=4)
        _, a = train(community, cfg)
        _, b = train(community, cfg)
        assert strip_timing(a) == strip_timing(b)

    def test_record_contents(self, community):
        cfg = TrainConfig(epochs=2, batch_size=40, layers=3, hidden=8)
        ckpt, metrics = train(community, cfg)
        r = metrics[-1]
        for key in ("epoch", "epoch_time", "train_loss", "alpha", "scores", "train_accuracy", "val_accuracy",
                    "val_roc_auc"):
            assert key in r
        assert len(r["alpha"]) == 3
        assert ckpt.epoch == 2 and ckpt.history == metrics

    def test_community_gin_fits(self, community):
        cfg = TrainConfig(epochs=200, batch_size=40, lr=0.003, backbone="gin", layers=5, hidden=32,
                          val_fraction=0.0, eval_every=200)
        _, metrics = train(community, cfg)
        assert metrics[-1]["train_accuracy"] >= 0.95

    def test_barbell_gap(self):
        graphs = generate_synthetic("barbell", {"n": 8}, seed=0)
        finals = {}
        for readout in ("histograph", "mean"):
            cfg = TrainConfig(epochs=500, batch_size=1, lr=0.01, task="node_regress", readout=readout,
                              backbone="gcn", layers=4, val_fraction=0.0, eval_every=500)
            finals[readout] = train(graphs, cfg)[1][-1]["train_mse"]
        assert finals["mean"] >= 10 * finals["histograph"]

    def test_divergence(self, community):
        cfg = TrainConfig(epochs=20, batch_size=40, lr=1e9, backbone="gin", layers=5)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(DivergenceError) as info:
                train(community, cfg)
        assert info.value.last_finite_epoch is None or info.value.last_finite_epoch >= 1

    def test_task_mismatch(self, community):
        with pytest.raises(ContractError):
            train(community, TrainConfig(task="node_regress", epochs=1))

    def test_full_ft_copies_backbone(self, community):
        base, _ = train(community, TrainConfig(epochs=1, layers=3, hidden=8, backbone="gcn", readout="mean"))
        cfg = TrainConfig(epochs=1, layers=3, hidden=8, backbone="gcn", mode="full_ft", lr=1e-12)
        tuned, _ = train(community, cfg, checkpoint=base)
        for name, arr in base.params.items():
            if name.startswith("backbone."):
                np.testing.assert_allclose(tuned.params[name], arr, atol=1e-9)
        assert "pool.hist.weight" in tuned.params


def digest(params, prefix):
    h = hashlib.sha256()
    for name in sorted(params):
        if name.startswith(prefix):
            h.update(name.encode() + np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pretrained(community):
    """GCN backbone after one epoch under a mean readout, plus its activation cache."""
    cfg = TrainConfig(epochs=1, batch_size=40, backbone="gcn", readout="mean", val_fraction=0.0)
    ckpt, _ = train(community, cfg)
    return ckpt, cache_activations(community, ckpt)


class TestFineTuning:
    def ft_config(self, readout, epochs=200):
        return TrainConfig(epochs=epochs, batch_size=40, lr=0.003, readout=readout, backbone="gcn",
                           mode="ft_frozen", checkpoint_path="unused", val_fraction=0.0, eval_every=epochs)

    def test_cache_matches_backbone(self, community, pretrained):
        ckpt, cache = pretrained
        assert len(cache) == 40 and cache.shape == (5, 32)
        model = model_from_checkpoint(ckpt)
        hist = model.history(batch_graphs([community[3]])).tensor.data
        np.testing.assert_array_equal(cache.graphs[3].history, hist)

    def test_backbone_frozen(self, pretrained):
        ckpt, cache = pretrained
        tuned = finetune_head(cache, self.ft_config("histograph", epochs=5), ckpt)
        assert digest(tuned.params, "backbone.") == digest(ckpt.params, "backbone.")

    def test_cached_forward_is_bitwise(self, community, pretrained):
        ckpt, cache = pretrained
        tuned = finetune_head(cache, self.ft_config("histograph", epochs=3), ckpt)
        model = model_from_checkpoint(tuned)
        with nc.no_grad():
            for i in (0, 17, 39):
                direct, _ = model.forward(batch_graphs([community[i]]))
                cached, _ = model.forward_from_history(stack_cached(cache.graphs, [i], model.dtype))
                assert direct.data.tobytes() == cached.data.tobytes()

    def test_beats_frozen_mean_pool(self, pretrained):
        ckpt, cache = pretrained
        acc = {r: finetune_head(cache, self.ft_config(r), ckpt).history[-1]["train_accuracy"]
               for r in ("histograph", "mean")}
        assert acc["histograph"] - acc["mean"] >= 0.10

    def test_rejects_mismatched_cache(self, pretrained):
        ckpt, cache = pretrained
        cfg = self.ft_config("histograph", epochs=1)
        other = train(generate_synthetic("community_classes", {"num_graphs": 4}, seed=1),
                      TrainConfig(epochs=1, layers=3, hidden=8, backbone="gcn", readout="mean"))[0]
        with pytest.raises(ContractError):
            finetune_head(cache, cfg, other)

    def test_requires_ft_mode(self, pretrained):
        ckpt, cache = pretrained
        with pytest.raises(ContractError):
            finetune_head(cache, TrainConfig(epochs=1), ckpt)


@pytest.fixture(scope="module")
def small_ckpt(community):
    return train(community, TrainConfig(epochs=2, layers=2, hidden=8, backbone="gcn", readout="mean"))[0]


class TestEvaluate:
    def test_does_not_mutate(self, community, small_ckpt):
        before = small_ckpt.to_bytes()
        evaluate(community, small_ckpt)
        assert small_ckpt.to_bytes() == before

    def test_majority_predictor(self, community, small_ckpt):
        params = dict(small_ckpt.params)
        params["head.weight"] = np.zeros_like(params["head.weight"])
        params["head.bias"] = np.array([1.0, 0.0], np.float32)
        labels = np.array([g.label for g in community])
        out = evaluate(community, Checkpoint(params, small_ckpt.config))
        assert out["accuracy"] == pytest.approx(np.mean(labels == 0))
        assert out["roc_auc"] == 0.5

    def test_task_mismatch(self, small_ckpt):
        barbell = generate_synthetic("barbell", {"n": 4}, seed=0)
        with pytest.raises(ContractError):
            evaluate(barbell, small_ckpt)

    def test_same_in_high_precision(self, community, small_ckpt):
        single = evaluate(community, small_ckpt)
        high = evaluate(community, small_ckpt, precision="high")
        assert single["accuracy"] == high["accuracy"]
        assert single["loss"] == pytest.approx(high["loss"], rel=1e-5)
