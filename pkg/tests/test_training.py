import numpy as np
import pytest

from sgq.bitconfig import uniform_config
from sgq.graph import Dataset, build_csr
from sgq.models import build_model, forward
from sgq.training import (
    TrainParams,
    TrainingDiverged,
    evaluate,
    finetune_quantized,
    train_full_precision,
)

from conftest import make_dataset


def two_clique_dataset() -> Dataset:
    """Two 5-cliques with one-hot cluster features: linearly separable."""
    edges = []
    for base in (0, 5):
        for i in range(5):
            for j in range(i + 1, 5):
                edges.append((base + i, base + j))
    edges.append((4, 5))  # single bridge
    graph = build_csr(edges, 10, symmetrize=True)
    feats = np.zeros((10, 2), dtype=np.float32)
    feats[:5, 0] = 1.0
    feats[5:, 1] = 1.0
    labels = np.array([0] * 5 + [1] * 5)
    train = np.array([True, False, False, False, False, True, False, False, False, False])
    val = np.array([False, True, False, False, False, False, True, False, False, False])
    test = ~(train | val)
    return Dataset(graph, feats, labels, train, val, test, num_classes=2)


class TestTrainFullPrecision:
    def test_zero_epochs_returns_initial_model(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=0)
        before = [p.value.copy() for p in model.parameters()]
        trained, val, test = train_full_precision(model, ds, TrainParams(epochs=0))
        for p, b in zip(trained.parameters(), before):
            assert np.array_equal(p.value, b)
        assert test == evaluate(trained, ds, None, "test")

    def test_separable_clusters_reach_perfect_train_accuracy(self):
        ds = two_clique_dataset()
        params = TrainParams(epochs=50, learning_rate=0.1, early_stop_patience=10_000)
        for seed in range(4):
            model = build_model("gcn", 2, 2, hidden=8, depth=2, seed=seed)
            model, _, _ = train_full_precision(model, ds, params)
            assert evaluate(model, ds, None, "train") == 1.0, f"seed {seed}"

    def test_deterministic_per_seed(self):
        ds = make_dataset()
        runs = []
        for _ in range(2):
            model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=3)
            model, val, test = train_full_precision(model, ds, TrainParams(epochs=25, seed=3))
            runs.append((val, test, [p.value.copy() for p in model.parameters()]))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]
        for a, b in zip(runs[0][2], runs[1][2]):
            assert a.tobytes() == b.tobytes()  # bit identical

    def test_divergence_reports_epoch(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=0)
        with pytest.raises(TrainingDiverged) as err:
            train_full_precision(model, ds, TrainParams(epochs=50, learning_rate=1e30))
        assert err.value.epoch >= 0


class TestFinetune:
    def test_zero_epochs_is_direct_quantization(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=1)
        model, _, _ = train_full_precision(model, ds, TrainParams(epochs=20))
        cfg = uniform_config(2)
        tuned, val, test = finetune_quantized(model, ds, cfg, TrainParams(epochs=0))
        assert test == evaluate(model, ds, cfg, "test")
        for p, q in zip(model.parameters(), tuned.parameters()):
            assert np.array_equal(p.value, q.value)

    def test_finetune_does_not_mutate_the_input_model(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=1)
        before = [p.value.copy() for p in model.parameters()]
        finetune_quantized(model, ds, uniform_config(2), TrainParams.for_finetune(epochs=5))
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.value, b)

    def test_returned_val_is_best_observed(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=1)
        model, _, _ = train_full_precision(model, ds, TrainParams(epochs=20))
        cfg = uniform_config(4)
        direct_val = evaluate(model, ds, cfg, "val")
        tuned, val, _ = finetune_quantized(model, ds, cfg, TrainParams.for_finetune(epochs=30))
        assert val >= direct_val  # epoch-0 checkpoint is always in the running
        assert evaluate(tuned, ds, cfg, "val") == val  # returned weights realize it


class TestEvaluate:
    def test_matches_brute_force_recount(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=2)
        acc = evaluate(model, ds, None, "test")
        logits = forward(model, ds).value
        hits = sum(
            int(np.argmax(logits[v]) == ds.labels[v])
            for v in range(ds.num_nodes)
            if ds.test_mask[v]
        )
        assert acc == hits / int(ds.test_mask.sum())

    def test_pure(self):
        ds = make_dataset()
        model = build_model("gat", 5, 3, hidden=4, depth=2, seed=2)
        assert evaluate(model, ds, None, "val") == evaluate(model, ds, None, "val")

    def test_empty_mask_rejected(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=2)
        with pytest.raises(ValueError, match="empty mask"):
            evaluate(model, ds, None, np.zeros(ds.num_nodes, bool))

    def test_unknown_mask_name_rejected(self):
        ds = make_dataset()
        model = build_model("gcn", 5, 3, hidden=4, depth=2, seed=2)
        with pytest.raises(ValueError, match="unknown mask"):
            evaluate(model, ds, None, "validation")
