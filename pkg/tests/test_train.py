import io

import numpy as np
import pytest
from scipy.special import log_softmax

from inrnet import autodiff as ad
from inrnet.autodiff import Value
from inrnet.data import constant_corpus, shape_corpus, threshold_labels
from inrnet.errors import ConfigError, DivergenceError, GraphError
from inrnet.inr import InrRecord, evaluate_many
from inrnet.layers import GraphBuilder, forward
from inrnet.train import (
    CsvLog,
    TrainConfig,
    cross_entropy,
    energy_distance,
    evaluate_metrics,
    mean_iou,
    pixel_accuracy,
    sample_points,
    sampling_scheme_experiment,
    top_k_accuracy,
    train_classifier,
    train_dense,
    train_generator,
)


def sign_corpus(n=24, seed=0):
    vals = np.random.default_rng(seed).uniform(0.1, 0.9, n) * np.where(np.arange(n) % 2, 1, -1)
    return constant_corpus(vals, (vals > 0).astype(int))


def pool_classifier(seed=0):
    b = GraphBuilder("inr->vector", 1, seed=seed)
    b.global_pool()
    b.dense(2)
    return b.build()


def conv_classifier(seed=0):
    b = GraphBuilder("inr->vector", 1, seed=seed)
    b.conv(4, k=3, pitch=0.25)
    b.norm("instance")
    b.relu()
    b.global_pool()
    b.dense(2)
    return b.build()


def legendre_generator(seed=0):
    b = GraphBuilder("vector->inr", 4, seed=seed)
    b.dense(6)
    b.legendre_head(1, max_degree=2)
    return b.build()


def snapshot(graph):
    return [p.data.copy() for p in graph.params()]


def changed(graph, before):
    return [not np.array_equal(p.data, q) for p, q in zip(graph.params(), before)]


def early_late(trace):
    k = max(1, len(trace) // 10)
    return np.median(trace[:k]), np.median(trace[-k:])


@pytest.fixture(scope="module")
def dense_data():
    recs = shape_corpus(60, seed=3)
    train = [InrRecord(r.model, dense_labels=threshold_labels(r.model, 256, i)) for i, r in enumerate(recs[:40])]
    test = [InrRecord(r.model, dense_labels=threshold_labels(r.model, 512, 10 ** 5 + i))
            for i, r in enumerate(recs[40:])]
    return train, test


def dense_graph(seed=0):
    b = GraphBuilder("inr->inr", 1, seed=seed)
    b.conv(2, k=3, pitch=0.0625)
    return b.build()


class TestConfig:
    @pytest.mark.parametrize("kwargs", [dict(steps=-1), dict(batch=0), dict(n_points=8), dict(optimizer="sgd"),
                                        dict(sampler="random"), dict(lr=0.0)])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.optimizer == "adamw" and cfg.weight_decay == 0.0 and cfg.scramble

    def test_grid_sampler_square(self):
        with pytest.warns(UserWarning):
            ps = sample_points("grid", 1000, 0)
        assert ps.n == 32 * 32  # nearest side to sqrt(1000)


class TestLosses:
    def test_cross_entropy_matches_scipy(self):
        logits = np.random.default_rng(0).normal(size=(5, 4))
        labels = np.array([0, 3, 1, 1, 2])
        with ad.precision(np.float64):
            got = cross_entropy(Value(logits), labels).item()
        ref = -np.mean(log_softmax(logits, axis=1)[np.arange(5), labels])
        assert got == pytest.approx(ref, rel=1e-12)

    def test_cross_entropy_bad_label(self):
        with pytest.raises(ValueError):
            cross_entropy(Value(np.zeros((2, 3))), np.array([0, 3]))

    def test_energy_distance_oracle(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(4, 10, 1)), rng.normal(size=(3, 10, 1)) + 0.5
        with ad.precision(np.float64):
            got = energy_distance(Value(x), Value(y), eps=0.0).item()

        def d(a, b):
            return np.sqrt(np.mean((a - b) ** 2))

        cross = np.mean([d(a, b) for a in x for b in y])
        sx = np.mean([d(x[i], x[j]) for i in range(4) for j in range(4) if i != j])
        sy = np.mean([d(y[i], y[j]) for i in range(3) for j in range(3) if i != j])
        assert got == pytest.approx(2 * cross - sx - sy, rel=1e-9)

    def test_energy_distance_small_for_same_law(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(200, 8, 1)), rng.normal(size=(200, 8, 1))
        with ad.precision(np.float64):
            same = energy_distance(Value(x), Value(y)).item()
            shifted = energy_distance(Value(x), Value(y + 1.0)).item()
        assert abs(same) < 0.05 * shifted

    def test_energy_distance_gradient_only_through_generated(self):
        x = Value(np.ones((2, 4, 1)), requires_grad=True)
        y = Value(np.zeros((2, 4, 1)), requires_grad=True)
        energy_distance(x, y).backward()
        assert x.grad is None or not np.any(x.grad)
        assert np.any(y.grad)


class TestMetrics:
    def test_perfect_predictor(self):
        labels = np.arange(12).repeat(3)
        scores = np.eye(12)[labels]
        assert top_k_accuracy(scores, labels, 1) == 1.0 and top_k_accuracy(scores, labels, 3) == 1.0
        assert pixel_accuracy(labels, labels) == 1.0 and mean_iou(labels, labels) == 1.0

    def test_uniform_random_top3(self):
        # binomial expectation 3 / 12 with std sqrt(0.25 * 0.75 / 1000) ~ 0.014
        rng = np.random.default_rng(0)
        acc = top_k_accuracy(rng.random((1000, 12)), rng.integers(0, 12, 1000), 3)
        assert acc == pytest.approx(0.25, abs=0.03)

    def test_ties_count_against(self):
        assert top_k_accuracy(np.zeros((4, 5)), np.zeros(4, int), 1) == 1.0
        scores = np.array([[1.0, 1.0, 0.0]])
        assert top_k_accuracy(scores, np.array([1]), 1) == 1.0
        scores = np.array([[2.0, 1.0, 1.0]])
        assert top_k_accuracy(scores, np.array([2]), 1) == 0.0

    def test_disjoint_iou_zero(self):
        truth = np.array([0, 0, 1, 1])
        pred = np.array([1, 1, 0, 0])
        assert mean_iou(pred, truth) == 0.0

    def test_iou_hand_computed(self):
        truth = np.array([0, 0, 0, 1, 1, 2])
        pred = np.array([0, 0, 1, 1, 1, 0])
        # class 0: inter 2, union 4; class 1: inter 2, union 3; class 2: inter 0, union 1
        assert mean_iou(pred, truth) == pytest.approx((2 / 4 + 2 / 3 + 0) / 3)

    def test_single_class_convention(self):
        truth = np.zeros(10, int)
        assert pixel_accuracy(truth, truth) == 1.0
        # only classes present in the truth are averaged
        assert mean_iou(truth, truth, n_classes=5) == 1.0

    def test_csv_log(self):
        buf = io.StringIO()
        log = CsvLog(buf, ["acc"])
        log.write(0, 0.5, 1.0)
        assert buf.getvalue().splitlines() == ["step,loss,acc", "0,0.5,1.0"]


class TestClassifier:
    def test_constant_two_class_separable(self):
        data = sign_corpus()
        cfg = TrainConfig(steps=200, batch=8, lr=3e-2, n_points=64)
        g, m = train_classifier(pool_classifier(), data, cfg)
        assert len(m.loss_trace) == 200
        assert evaluate_metrics(g, data, cfg).top1 == 1.0

    def test_zero_steps_unchanged(self):
        g = conv_classifier()
        before = snapshot(g)
        g, m = train_classifier(g, sign_corpus(), TrainConfig(steps=0, n_points=64))
        assert m.loss_trace == [] and not any(changed(g, before))

    def test_seed_determinism(self):
        cfg = TrainConfig(steps=5, batch=4, n_points=64, seed=3)
        a = train_classifier(conv_classifier(), sign_corpus(), cfg)[1].loss_trace
        b = train_classifier(conv_classifier(), sign_corpus(), cfg)[1].loss_trace
        assert a == b

    def test_gradient_flow(self):
        g = conv_classifier()
        before = snapshot(g)
        train_classifier(g, sign_corpus(), TrainConfig(steps=1, batch=4, n_points=64))
        flags = changed(g, before)
        names = [n for n, ps in [(node.name, list(node.params.values())) for node in g.nodes] for _ in ps]
        per_layer = {}
        for name, flag in zip(names, flags):
            per_layer[name] = per_layer.get(name, False) or flag
        assert per_layer and all(per_layer.values())

    def test_loss_decreases(self):
        _, m = train_classifier(conv_classifier(), sign_corpus(), TrainConfig(steps=60, batch=8, n_points=64))
        early, late = early_late(m.loss_trace)
        assert late < early

    def test_log_lines(self):
        buf = io.StringIO()
        train_classifier(pool_classifier(), sign_corpus(), TrainConfig(steps=3, n_points=64), log=buf)
        lines = buf.getvalue().splitlines()
        assert lines[0] == "step,loss" and len(lines) == 4
        assert [int(line.split(",")[0]) for line in lines[1:]] == [0, 1, 2]

    def test_nan_loss_aborts_with_step(self):
        data = constant_corpus([np.nan, 0.5], [0, 1])
        with pytest.raises(DivergenceError, match="step 0"):
            train_classifier(pool_classifier(), data, TrainConfig(steps=3, batch=2, n_points=64))

    def test_requires_labels_and_io(self):
        with pytest.raises(ConfigError):
            train_classifier(pool_classifier(), constant_corpus([0.1]), TrainConfig(steps=1, n_points=64))
        with pytest.raises(GraphError):
            train_classifier(dense_graph(), sign_corpus(), TrainConfig(steps=1, n_points=64))


class TestDense:
    def test_threshold_labels_pixel_accuracy(self, dense_data):
        train, test = dense_data
        cfg = TrainConfig(steps=200, batch=8, lr=3e-2, n_points=1024)
        g, m = train_dense(dense_graph(), train, cfg)
        early, late = early_late(m.loss_trace)
        assert late < early
        assert evaluate_metrics(g, test, cfg).pixel_accuracy > 0.95

    def test_seed_determinism(self, dense_data):
        train, _ = dense_data
        cfg = TrainConfig(steps=3, batch=4, n_points=256, seed=1)
        a = train_dense(dense_graph(), train, cfg)[1].loss_trace
        b = train_dense(dense_graph(), train, cfg)[1].loss_trace
        assert a == b

    def test_single_class_metrics(self):
        rec = constant_corpus([0.5])[0]
        coords = np.random.default_rng(0).uniform(-1, 1, size=(50, 2))
        data = [InrRecord(rec.model, dense_labels=np.column_stack([coords, np.zeros(50)]))]
        b = GraphBuilder("inr->inr", 1, seed=0)
        b.linear(2, W=np.zeros((1, 2)), b=np.array([1.0, 0.0]))
        m = evaluate_metrics(b.build(), data, TrainConfig(n_points=64))
        assert m.pixel_accuracy == 1.0 and m.miou == 1.0

    def test_rejects_outside_coordinates(self):
        rec = constant_corpus([0.5])[0]
        bad = [InrRecord(rec.model, dense_labels=np.zeros((3, 3))),
               InrRecord(rec.model, dense_labels=np.array([[1.5, 0.0, 0.0]]))]
        with pytest.raises(ConfigError, match="record 1"):
            train_dense(dense_graph(), bad, TrainConfig(steps=1, n_points=64))


class TestGenerator:
    def test_missing_plugin(self):
        with pytest.raises(ConfigError):
            train_generator(legendre_generator(), constant_corpus([0.7]), TrainConfig(steps=1, n_points=64))

    def test_zero_loss_leaves_params(self):
        g = legendre_generator()
        before = snapshot(g)
        zero = lambda real, gen: Value(np.zeros(()))  # noqa: E731
        g, m = train_generator(g, constant_corpus([0.7] * 4), TrainConfig(steps=5, batch=2, n_points=64), zero)
        assert m.loss_trace == [0.0] * 5 and not any(changed(g, before))

    def test_seed_determinism(self):
        cfg = TrainConfig(steps=4, batch=4, n_points=64, seed=2)
        data = constant_corpus([0.7] * 8)
        a = train_generator(legendre_generator(), data, cfg, energy_distance)[1].loss_trace
        b = train_generator(legendre_generator(), data, cfg, energy_distance)[1].loss_trace
        assert a == b

    def test_constant_target_mean(self):
        data = constant_corpus([0.7] * 16)
        cfg = TrainConfig(steps=1000, batch=8, lr=1e-2, n_points=256)
        g, m = train_generator(legendre_generator(), data, cfg, energy_distance)
        early, late = early_late(m.loss_trace)
        assert late < early
        ps = sample_points("sobol", 4096, 7)
        z = np.random.default_rng(5).standard_normal((64, 4))
        with ad.no_grad():
            means = forward(g, z, ps).values.data.mean(axis=(1, 2))
        assert np.abs(means - 0.7).max() < 0.05
        assert np.allclose(evaluate_many([data[0].model], ps), 0.7)


class TestSchemeExperiment:
    def test_table_shape_and_csv(self):
        data = sign_corpus(8)
        cfg = TrainConfig(steps=2, batch=4, n_points=64)
        table = sampling_scheme_experiment(pool_classifier, data, cfg)
        assert table.values.shape == (3, 3) and table.per_seed.shape == (1, 3, 3)
        assert table.schemes == ("qmc", "grid", "shrunk")
        lines = table.csv().splitlines()
        assert lines[0] == "train\\eval,qmc,grid,shrunk"
        assert [line.split(",")[0] for line in lines[1:]] == ["qmc", "grid", "shrunk"]

    def test_diagonal_ok_is_non_strict(self):
        from inrnet.train import SchemeTable

        vals = np.array([[0.9, 0.5, 0.7], [0.6, 0.6, 0.8], [0.2, 0.3, 0.1]])
        # row 1 diagonal ties its minimum and row 2 diagonal is the minimum
        assert SchemeTable(("a", "b", "c"), vals, vals[None]).diagonal_ok().tolist() == [True, True, True]
