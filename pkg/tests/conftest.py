import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from _planetoid import ensure_sgqd, raw_available  # noqa: E402

from sgq.graph import Dataset, build_csr, load_dataset  # noqa: E402


def make_dataset(
    num_nodes=8,
    num_feats=5,
    num_classes=3,
    edges=((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (0, 7), (2, 6)),
    seed=0,
) -> Dataset:
    """Small random dataset with one-third train/val/test splits."""
    rng = np.random.default_rng(seed)
    graph = build_csr(edges, num_nodes, symmetrize=True)
    feats = rng.random((num_nodes, num_feats)).astype(np.float32)
    labels = rng.integers(0, num_classes, num_nodes)
    idx = rng.permutation(num_nodes)
    masks = [np.zeros(num_nodes, dtype=bool) for _ in range(3)]
    for i, node in enumerate(idx):
        masks[i % 3][node] = True
    return Dataset(graph, feats, labels, *masks, num_classes=num_classes)


@pytest.fixture()
def tiny_dataset() -> Dataset:
    return make_dataset()


def _load_benchmark(name: str) -> Dataset:
    if not raw_available(name):
        pytest.skip(
            f"raw planetoid files for {name} not present under data/planetoid/ "
            "(see README: fetching datasets)"
        )
    return load_dataset(ensure_sgqd(name))


@pytest.fixture(scope="session")
def cora() -> Dataset:
    return _load_benchmark("cora")


@pytest.fixture(scope="session")
def citeseer() -> Dataset:
    return _load_benchmark("citeseer")


@pytest.fixture(scope="session")
def trained_cora_gcn(cora):
    """Full-precision Cora GCN baseline shared across tests (seed 0)."""
    from sgq.models import build_model
    from sgq.training import TrainParams, train_full_precision

    model = build_model("gcn", cora.input_dim, cora.num_classes, seed=0)
    model, val, test = train_full_precision(model, cora, TrainParams(epochs=200, seed=0))
    return model, val, test
