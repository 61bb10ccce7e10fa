"""Test-side conversion of raw Planetoid files into SGQD containers.

This mirrors the standalone converter tool (converter/) so the Python test
suite stays runnable without Node: same source files, same assembly rules,
same container bytes. Both implementations are cross-checked in
test_acceptance (S1).

Assembly, following the benchmark distribution's standard split:
  - features = vstack(allx, tx) with test rows permuted into their
    test.index positions; labels likewise from (ally, ty) one-hots;
  - citeseer's isolated test nodes (test.index gaps) get zero feature and
    label rows and stay out of every mask;
  - train = first len(y) nodes, val = next 500, test = test.index entries;
  - edges from the adjacency dict, self references dropped, symmetrized.
"""

from __future__ import annotations

import pickle
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from sgq.graph import Dataset, build_csr, save_dataset

VAL_COUNT = 500

RAW_DIR = Path(__file__).resolve().parent.parent / "data" / "planetoid"
OUT_DIR = Path(__file__).resolve().parent.parent / "data"


def _load_pickle(path: Path):
    with open(path, "rb") as f:
        return pickle.load(f, encoding="latin1")


def planetoid_to_dataset(raw_dir: Path, name: str) -> Dataset:
    parts = {}
    for suffix in ("x", "y", "tx", "ty", "allx", "ally", "graph"):
        parts[suffix] = _load_pickle(raw_dir / f"ind.{name}.{suffix}")
    test_idx = np.loadtxt(raw_dir / f"ind.{name}.test.index", dtype=np.int64)

    num_nodes = len(parts["graph"])
    x, tx, allx = parts["x"], parts["tx"], parts["allx"]
    y, ty, ally = parts["y"], parts["ty"], parts["ally"]
    num_classes = y.shape[1]

    test_sorted = np.sort(test_idx)
    span = np.arange(test_sorted.min(), test_sorted.max() + 1)
    if len(span) != len(test_idx):  # citeseer: isolated test nodes missing from tx
        tx_full = sp.lil_matrix((len(span), allx.shape[1]), dtype=np.float32)
        tx_full[test_sorted - span.min()] = tx
        tx = tx_full.tocsr()
        ty_full = np.zeros((len(span), num_classes), dtype=ty.dtype)
        ty_full[test_sorted - span.min()] = ty
        ty = ty_full

    features = sp.vstack([allx, tx]).toarray().astype(np.float32)
    labels_onehot = np.vstack([ally, ty])
    # undo the shuffled test ordering: move span rows into test.index positions
    features[test_idx] = features[span]
    labels_onehot[test_idx] = labels_onehot[span]
    labels = labels_onehot.argmax(axis=1).astype(np.int64)

    edges = [
        (u, v)
        for u, nbrs in parts["graph"].items()
        for v in nbrs
        if u != v
    ]
    graph = build_csr(edges, num_nodes, symmetrize=True)

    train_mask = np.zeros(num_nodes, dtype=bool)
    train_mask[: y.shape[0]] = True
    val_mask = np.zeros(num_nodes, dtype=bool)
    val_mask[y.shape[0] : y.shape[0] + VAL_COUNT] = True
    test_mask = np.zeros(num_nodes, dtype=bool)
    test_mask[test_sorted] = True
    return Dataset(graph, features, labels, train_mask, val_mask, test_mask, num_classes)


def ensure_sgqd(name: str) -> Path:
    """Convert data/planetoid/ind.<name>.* into data/<name>.sgqd once."""
    out = OUT_DIR / f"{name}.sgqd"
    if not out.exists():
        save_dataset(planetoid_to_dataset(RAW_DIR, name), out)
    return out


def raw_available(name: str) -> bool:
    return (RAW_DIR / f"ind.{name}.graph").exists()
