import math

import numpy as np
import pytest

from chaingraph.data import Dataset, synth_blobs
from chaingraph.distributions import SOFTPLUS_STD, Binary, Multilabel, RectifiedGaussian
from chaingraph.graph import GraphError, LayeredChainGraph, augment_dropout, build_refinement, init_params, sequential
from chaingraph.inference import StochasticMask, feed_forward, forward
from chaingraph.training import (CROSS_ENTROPY, SQUARED_ERROR, OptimizerState, TrainConfig, backward, evaluate,
                                 loss_and_grad, loss_eval, sgd_step, train)
from chaingraph.verify import gradient_check, random_dense_net, random_smooth_net


def _blobs(seed=0, per_class=40):
    return synth_blobs(3, per_class, 2, 10.0, seed=seed)


def _classifier(hidden=Binary(-1, 1), sizes=(2, 8, 1), c=3, seed=0):
    g = sequential(list(sizes), hidden, Multilabel(c))
    init_params(g, seed=seed)
    return g


class TestLoss:
    def test_uniform_prediction(self):
        q = np.full(10, 0.1)
        for t in (0, 3, 9):
            assert loss_eval(CROSS_ENTROPY, q, t) == pytest.approx(math.log(10), abs=1e-12)

    def test_uniform_from_preactivation(self):
        assert loss_eval(CROSS_ENTROPY, None, 4, e=np.zeros(10)) == pytest.approx(2.302585, abs=1e-6)

    def test_correct_one_hot(self):
        assert loss_eval(CROSS_ENTROPY, np.array([0.0, 1.0, 0.0]), 1) == 0.0

    def test_squared_error_zero(self):
        q = np.array([[0.2, -1.0], [3.0, 0.5]])
        assert loss_eval(SQUARED_ERROR, q, q.copy()) == 0.0

    def test_squared_error_value(self):
        assert loss_eval(SQUARED_ERROR, np.array([1.0, 2.0]), np.array([0.0, 0.0])) == 5.0

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            loss_eval(CROSS_ENTROPY, np.full(3, 1 / 3), 3)

    def test_log_sum_exp_stable(self):
        e = np.array([1000.0, 0.0])
        assert loss_eval(CROSS_ENTROPY, None, 0, e=e) == pytest.approx(0.0, abs=1e-12)
        assert loss_eval(CROSS_ENTROPY, None, 1, e=e) == pytest.approx(1000.0)

    def test_cross_entropy_needs_multilabel_output(self):
        g = sequential([2, 3, 1], Binary())
        st = feed_forward(g, np.zeros((2, 2)))
        with pytest.raises(GraphError):
            loss_and_grad(CROSS_ENTROPY, st, np.array([0, 1]))

    def test_unknown_loss(self):
        with pytest.raises(ValueError):
            loss_eval("hinge", np.zeros(2), 0)


class TestBackward:
    def test_zero_upstream_gradient(self):
        g = _classifier()
        st = feed_forward(g, np.random.default_rng(0).random((4, 2)))
        grads = backward(g, st, grad_e=np.zeros((4, 3)))
        assert all(not v.any() for v in grads.values())
        assert set(grads) == set(g.params.keys())

    def test_single_linear_node(self):
        lin = RectifiedGaussian(1.0, 0.5)
        g = LayeredChainGraph().add_layer("x", 3, Binary(), is_input=True).add_layer("y", 1, lin)
        g.connect("x", "y")
        init_params(g, seed=1)
        x = np.array([[0.2, 0.7, 1.0]])
        z = np.array([[0.4]])
        mask = StochasticMask({"y": np.ones((1, 1), bool)}, {"y": z})
        st = forward(g, x, mask=mask)
        delta = np.array([[1.7]])
        grads = backward(g, st, grad_q=delta)
        np.testing.assert_allclose(grads["W:x->y"], x.T * 1.7, atol=1e-15)
        np.testing.assert_allclose(grads["b:y"], [[1.7]], atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_smooth_net_matches_finite_differences(self, seed):
        g, X, y = random_smooth_net(seed)
        err, _ = gradient_check(g, X, y)
        assert err <= 1e-4

    def test_squared_error_gradient(self):
        g = random_dense_net([3, 4, 2], RectifiedGaussian(0.0, SOFTPLUS_STD),
                             Binary(-1, 1), seed=2)
        X = np.random.default_rng(0).random((5, 3))
        err, _ = gradient_check(g, X, np.random.default_rng(1).normal(size=(5, 2)), loss=SQUARED_ERROR)
        assert err <= 1e-4

    def test_pcff_frozen_noise(self):
        g = random_dense_net([3, 5, 5, 1], RectifiedGaussian(0.2, 0.9), Multilabel(3), 3)
        X = np.random.default_rng(2).random((4, 3))
        err, mask = gradient_check(g, X, np.array([0, 2, 1, 0]), rate=0.6, seed=3)
        assert mask.n_sampled() > 0
        assert err <= 1e-4

    def test_sampled_discrete_nodes_stop_gradient(self):
        g = _classifier(Binary(-1, 1), sizes=(2, 4, 1))
        X = np.random.default_rng(0).random((3, 2))
        st = forward(g, X, rate=1.0, rng=np.random.default_rng(1), exclude={"y"})
        _, _, ge = loss_and_grad(CROSS_ENTROPY, st, np.array([0, 1, 2]))
        grads = backward(g, st, grad_e=ge)
        assert not grads["W:x->h1"].any() and not grads["b:h1"].any()
        assert grads["W:h1->y"].any()

    def test_dropout_gates_are_constants(self):
        g = augment_dropout(_classifier(Binary(-1, 1), sizes=(2, 4, 1)), "h1", 0.5)
        X = np.random.default_rng(0).random((3, 2))
        mask = StochasticMask(dropout={"h1": np.zeros((3, 4))})
        st = forward(g, X, dropout="train", mask=mask)
        _, _, ge = loss_and_grad(CROSS_ENTROPY, st, np.array([0, 1, 2]))
        grads = backward(g, st, grad_e=ge)
        # every gate closed: nothing reaches h1 or its outgoing weights
        assert not grads["W:h1->y"].any() and not grads["W:x->h1"].any()

    def test_tied_gradient_is_sum_of_copies(self):
        dist = Binary(-1, 1)
        base = LayeredChainGraph().add_layer("x", 2, Binary(), is_input=True).add_layer("y", 3, dist)
        base.connect("x", "y")
        ref = LayeredChainGraph().add_layer("r", 3, dist, is_input=True).add_layer("z", 2, dist)
        ref.add_layer("r_out", 3, dist).connect("r", "z").connect("z", "r_out")
        rng = np.random.default_rng(0)
        for g in (base, ref):
            for k, v in g.params.items():
                v[...] = rng.normal(size=v.shape)
        tied = build_refinement(base, ref)
        tied.add_layer("out", 1, Multilabel(3)).connect("y", "out")
        tied.output = "out"
        init_params(tied, seed=9)
        for k, v in list(tied.params.items()):
            v[...] = rng.normal(size=v.shape)
        # untie: give the copy its own key holding the same values
        untied = tied.copy()
        for c in untied.connections:
            if c.child == "y~":
                c.tie_group = "W:copy"
        untied.params.arrays["W:copy"] = untied.params["W:x->y"].copy()
        X, t = rng.random((5, 2)), np.array([0, 1, 2, 1, 0])
        gt = backward(tied, *_state_grad(tied, X, t))
        gu = backward(untied, *_state_grad(untied, X, t))
        np.testing.assert_allclose(gt["W:x->y"], gu["W:x->y"] + gu["W:copy"], atol=1e-14)

    def test_state_from_another_graph(self):
        st = feed_forward(_classifier(sizes=(2, 4, 1)), np.zeros((1, 2)))
        with pytest.raises(GraphError):
            backward(_classifier(sizes=(2, 4, 4, 1)), st, grad_e=np.zeros((1, 3)))


def _state_grad(g, X, t):
    st = feed_forward(g, X)
    _, _, ge = loss_and_grad(CROSS_ENTROPY, st, t)
    return st, None, None, ge


class TestSGD:
    def _store(self, value=0.0):
        g = LayeredChainGraph().add_layer("x", 1, Binary(), is_input=True).add_layer("y", 1, Binary(), bias=False)
        g.connect("x", "y")
        g.params["W:x->y"] = np.array([[value]])
        return g.params

    def test_plain_step(self):
        p = self._store(1.0)
        sgd_step(p, {"W:x->y": np.array([[2.0]])}, OptimizerState(0.1, 0.0))
        assert p["W:x->y"][0, 0] == pytest.approx(0.8)

    def test_zero_gradient(self):
        p = self._store(0.4)
        sgd_step(p, {"W:x->y": np.zeros((1, 1))}, OptimizerState(0.1, 0.9))
        assert p["W:x->y"][0, 0] == 0.4

    def test_two_momentum_steps(self):
        p, opt = self._store(0.0), OptimizerState(0.1, 0.9)
        for _ in range(2):
            sgd_step(p, {"W:x->y": np.ones((1, 1))}, opt)
        assert p["W:x->y"][0, 0] == pytest.approx(-0.29, abs=1e-15)

    def test_frozen_untouched(self):
        g = LayeredChainGraph().add_layer("x", 2, Binary(), is_input=True).add_layer("y", 2, Binary())
        g.connect("x", "y", trainable=False)
        g.params["W:x->y"] = np.ones((2, 2))
        sgd_step(g.params, {"W:x->y": np.ones((2, 2)), "b:y": np.ones((2, 1))}, OptimizerState(0.1, 0.9))
        np.testing.assert_array_equal(g.params["W:x->y"], 1.0)
        np.testing.assert_array_equal(g.params["b:y"], -0.1)

    def test_shape_mismatch(self):
        with pytest.raises(GraphError):
            sgd_step(self._store(), {"W:x->y": np.ones(2)}, OptimizerState())

    def test_small_step_decreases_loss(self):
        g, X, y = random_smooth_net(4)
        def loss():
            st = feed_forward(g, X)
            return loss_eval(CROSS_ENTROPY, st.q["y"], y, e=st.e["y"])
        before = loss()
        st = feed_forward(g, X)
        _, _, ge = loss_and_grad(CROSS_ENTROPY, st, y)
        grads = backward(g, st, grad_e=ge)
        saved = {k: v.copy() for k, v in g.params.items()}
        decreased = []
        for lr in (1e-2, 1e-3, 1e-4):
            sgd_step(g.params, grads, OptimizerState(lr, 0.0))
            decreased.append(loss() < before)
            for k, v in saved.items():
                g.params[k] = v
        assert any(decreased)


class TestTrain:
    def test_zero_epochs(self):
        g = _classifier()
        init = {k: v.copy() for k, v in g.params.items()}
        _, hist = train(g, _blobs(), TrainConfig(epochs=0))
        assert hist == []
        for k, v in init.items():
            np.testing.assert_array_equal(g.params[k], v)

    def test_separable_blobs_reach_zero_error(self):
        g = _classifier()
        _, hist = train(g, _blobs(), TrainConfig(epochs=200, batch_size=16, lr=0.05, val_fraction=0.0))
        assert hist[-1]["train_err"] == 0.0

    @pytest.mark.parametrize("mode,extra", [("ff", {}), ("dropout", {}), ("pcff", {"sample_rate": 0.5})])
    def test_bitwise_reproducible(self, mode, extra):
        runs = []
        for _ in range(2):
            g = _classifier(RectifiedGaussian(0.0, "tanh"))
            if mode == "dropout":
                g = augment_dropout(g, "h1", 0.5)
            _, hist = train(g, _blobs(), TrainConfig(epochs=4, mode=mode, seed=3, **extra))
            runs.append((hist, {k: v.copy() for k, v in g.params.items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_history_columns(self):
        _, hist = train(_classifier(), _blobs(), TrainConfig(epochs=2))
        assert [set(r) for r in hist] == [{"epoch", "train_loss", "train_err", "val_loss", "val_err"}] * 2

    def test_early_stopping_restores_best(self):
        g = _classifier(sizes=(2, 16, 1))
        # a large step makes validation loss wander so stopping has work to do
        cfg = TrainConfig(epochs=60, lr=0.8, momentum=0.9, patience=3, val_fraction=0.3, seed=1)
        _, hist = train(g, _blobs(per_class=20), cfg)
        from chaingraph.data import split
        _, val = split(_blobs(per_class=20), 0.3, 1)
        best = min(r["val_loss"] for r in hist)
        assert evaluate(g, val)["loss"] <= best + 1e-12
        assert len(hist) < 60

    def test_empty_training_split(self):
        empty = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 3)
        with pytest.raises(ValueError):
            train(_classifier(), empty, TrainConfig(epochs=1))

    def test_dropout_mode_needs_annotation(self):
        with pytest.raises(ValueError):
            train(_classifier(), _blobs(), TrainConfig(epochs=1, mode="dropout"))

    @pytest.mark.parametrize("kwargs", [dict(val_fraction=1.0), dict(patience=0), dict(mode="gibbs"),
                                        dict(sample_rate=2.0), dict(loss="hinge")])
    def test_config_invariants(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestEvaluate:
    def test_all_correct(self):
        g = _classifier()
        train(g, _blobs(), TrainConfig(epochs=200, batch_size=16, lr=0.05, val_fraction=0.0))
        assert evaluate(g, _blobs())["error"] == 0.0

    def test_uniform_predictor(self):
        g = sequential([4, 1], Binary(), Multilabel(10))
        data = Dataset(np.random.default_rng(0).random((200, 4)), np.repeat(np.arange(10), 20), 10)
        res = evaluate(g, data)
        # every score ties, argmax picks label 0
        assert 0.85 <= res["error"] <= 0.95
        assert res["loss"] == pytest.approx(math.log(10))

    def test_single_sample(self):
        g = _classifier()
        x = np.array([[0.3, 0.6]])
        q = feed_forward(g, x).output[0]
        t = int(np.argmax(q))
        res = evaluate(g, Dataset(x, np.array([t]), 3))
        assert res["error"] == 0.0
        assert res["loss"] == pytest.approx(-math.log(q[t]), abs=1e-12)

    def test_uses_dropout_test_mode(self):
        g = augment_dropout(_classifier(), "h1", 0.3)
        from chaingraph.graph import dropout_scaled
        data = _blobs()
        assert evaluate(g, data) == pytest.approx(evaluate(dropout_scaled(g), data), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(_classifier(), Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 3))
