"""Sparse graph container, degree queries, and the SGQD v1 dataset format.

Graphs are stored undirected in compressed-sparse-row form: ingest
symmetrizes and de-duplicates the edge list. Self loops are a model-level
choice (see ``add_self_loops``), so raw topology stays intact for the
degree statistics used by degree-bucketed quantization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

SGQD_MAGIC = b"SGQD"
SGQD_VERSION = 1


class FormatError(ValueError):
    """A container file does not match the SGQD v1 layout."""


@dataclass(frozen=True)
class CsrGraph:
    """Immutable CSR adjacency. Neighbors of v: col_idx[row_ptr[v]:row_ptr[v+1]].

    Within each row the column indices are strictly increasing, so edges are
    de-duplicated by construction. Safe to share across threads.
    """

    num_nodes: int
    row_ptr: np.ndarray
    col_idx: np.ndarray

    def __post_init__(self):
        rp, ci = self.row_ptr, self.col_idx
        if len(rp) != self.num_nodes + 1 or rp[0] != 0 or rp[-1] != len(ci):
            raise ValueError("row_ptr must run from 0 to len(col_idx)")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.num_nodes):
            raise ValueError("col_idx entry out of [0, num_nodes)")
        if len(ci) > 1:
            # non-increasing neighbor pairs are legal only across row boundaries
            breaks = np.flatnonzero(np.diff(ci) <= 0) + 1
            if not np.isin(breaks, rp[1:-1]).all():
                raise ValueError("col_idx rows must be strictly increasing")
        self.row_ptr.setflags(write=False)
        self.col_idx.setflags(write=False)

    @property
    def num_edges(self) -> int:
        """Number of directed edges (CSR entries)."""
        return int(len(self.col_idx))

    def degree(self, v: int) -> int:
        if not 0 <= v < self.num_nodes:
            raise IndexError(f"node {v} out of range for {self.num_nodes} nodes")
        return int(self.row_ptr[v + 1] - self.row_ptr[v])

    def degrees(self) -> np.ndarray:
        """Degree of every node, as an int64 array."""
        return np.diff(self.row_ptr)

    def neighbors(self, v: int) -> np.ndarray:
        if not 0 <= v < self.num_nodes:
            raise IndexError(f"node {v} out of range for {self.num_nodes} nodes")
        return self.col_idx[self.row_ptr[v] : self.row_ptr[v + 1]]

    def edge_endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-edge (src, dst) arrays in CSR order.

        Edge e sits in row dst[e] and contributes node src[e]'s embedding to
        dst[e]'s neighbor sum; dst is non-decreasing by construction.
        """
        dst = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees())
        return self.col_idx.astype(np.int64, copy=False), dst


def build_csr(edge_list, num_nodes: int, symmetrize: bool = False) -> CsrGraph:
    """Build a CSR graph from (src, dst) pairs; sorts and de-duplicates.

    With ``symmetrize`` both directions of every pair are inserted. Raises
    ValueError naming the first offending edge if an index is out of range.
    """
    edges = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if len(edges):
        bad = (edges < 0) | (edges >= num_nodes)
        if bad.any():
            u, v = edges[bad.any(axis=1)][0]
            raise ValueError(f"edge ({u}, {v}) out of range for {num_nodes} nodes")
    if symmetrize and len(edges):
        edges = np.concatenate([edges, edges[:, ::-1]])
    # sort by (dst, src) so each CSR row comes out ordered, then de-duplicate
    if len(edges):
        order = np.lexsort((edges[:, 0], edges[:, 1]))
        edges = edges[order]
        keep = np.ones(len(edges), dtype=bool)
        keep[1:] = np.any(edges[1:] != edges[:-1], axis=1)
        edges = edges[keep]
        counts = np.bincount(edges[:, 1], minlength=num_nodes)
        col_idx = edges[:, 0].copy()
    else:
        counts = np.zeros(num_nodes, dtype=np.int64)
        col_idx = np.empty(0, dtype=np.int64)
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    return CsrGraph(num_nodes, row_ptr, col_idx)


def add_self_loops(graph: CsrGraph) -> CsrGraph:
    """Return a graph with (v, v) present for every v. Idempotent."""
    src, dst = graph.edge_endpoints()
    loops = np.arange(graph.num_nodes, dtype=np.int64)
    edges = np.stack(
        [np.concatenate([src, loops]), np.concatenate([dst, loops])], axis=1
    )
    return build_csr(edges, graph.num_nodes, symmetrize=False)


@dataclass(frozen=True)
class Dataset:
    """A node-classification problem: graph, features, labels, and splits."""

    graph: CsrGraph
    features: np.ndarray  # float32, (N, D0)
    labels: np.ndarray  # int64, (N,)
    train_mask: np.ndarray  # bool, (N,)
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.features.shape[0] != n:
            raise ValueError("feature row count must equal num_nodes")
        if self.labels.shape != (n,):
            raise ValueError("labels must be one class index per node")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of [0, num_classes)")
        for m in (self.train_mask, self.val_mask, self.test_mask):
            if m.shape != (n,) or m.dtype != np.bool_:
                raise ValueError("masks must be boolean arrays of length num_nodes")
        overlap = (
            (self.train_mask & self.val_mask)
            | (self.train_mask & self.test_mask)
            | (self.val_mask & self.test_mask)
        )
        if overlap.any():
            raise ValueError("train/val/test masks must be pairwise disjoint")

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated container: expected {n} bytes of {what}")
    return buf


def load_dataset(path) -> Dataset:
    """Read an SGQD v1 container; the stored edge list is (re-)symmetrized.

    Distinct failures (bad magic, wrong version, truncation, invariant
    violations) raise FormatError with a distinct message.
    """
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SGQD_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {SGQD_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != SGQD_VERSION:
            raise FormatError(f"unsupported version {version}")
        n, d0, num_classes, num_edges = struct.unpack(
            "<4I", _read_exact(f, 16, "header")
        )
        edges = np.frombuffer(
            _read_exact(f, 8 * num_edges, "edge list"), dtype="<u4"
        ).reshape(-1, 2)
        features = (
            np.frombuffer(_read_exact(f, 4 * n * d0, "features"), dtype="<f4")
            .reshape(n, d0)
            .astype(np.float32)
        )
        labels = np.frombuffer(_read_exact(f, 4 * n, "labels"), dtype="<u4").astype(
            np.int64
        )
        masks = []
        for name in ("train", "val", "test"):
            raw = np.frombuffer(_read_exact(f, n, f"{name} mask"), dtype=np.uint8)
            if np.any(raw > 1):
                raise FormatError(f"{name} mask bytes must be 0 or 1")
            masks.append(raw.astype(bool))
        if f.read(1):
            raise FormatError("trailing bytes after container payload")
    try:
        graph = build_csr(edges.astype(np.int64), n, symmetrize=True)
        return Dataset(graph, features, labels, *masks, num_classes=num_classes)
    except ValueError as e:
        raise FormatError(f"container violates dataset invariants: {e}") from e


def save_dataset(dataset: Dataset, path) -> None:
    """Write an SGQD v1 container. Inverse of load_dataset up to bit equality."""
    g = dataset.graph
    src, dst = g.edge_endpoints()
    with open(path, "wb") as f:
        f.write(SGQD_MAGIC)
        f.write(
            struct.pack(
                "<5I",
                SGQD_VERSION,
                g.num_nodes,
                dataset.input_dim,
                dataset.num_classes,
                g.num_edges,
            )
        )
        pairs = np.empty((g.num_edges, 2), dtype="<u4")
        pairs[:, 0] = src
        pairs[:, 1] = dst
        f.write(pairs.tobytes())
        f.write(np.ascontiguousarray(dataset.features, dtype="<f4").tobytes())
        f.write(dataset.labels.astype("<u4").tobytes())
        for m in (dataset.train_mask, dataset.val_mask, dataset.test_mask):
            f.write(m.astype(np.uint8).tobytes())
