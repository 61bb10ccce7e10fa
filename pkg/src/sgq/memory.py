"""Bit-exact accounting of feature and weight memory under a bit config.

Counted feature elements: at every layer k, the N x D_{k-1} embedding matrix
the layer consumes (the layer-0 input features are a quantizable embedding,
which is what dominates full-precision sizes), plus one attention entry per
directed edge per layer for architectures that store attention. GCN's
constant attention is never stored and contributes zero bits.

The default attention accounting is sparse (per edge); dense_nxn mode
mirrors the q x N x N formulation instead. MB means 10^6 bytes throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitconfig import ATT, COM, QuantConfig, _model_edge_count, average_bits, bits_for

FP_BITS = 32

METRICS_COLUMNS = ("config_id", "average_bits", "memory_mb", "saving", "accuracy")


@dataclass(frozen=True)
class MemoryReport:
    total_feature_bits: int
    per_layer_bits: tuple[int, ...]
    weight_bits: int
    average_bits: float
    saving_ratio_vs_fp32: float

    @property
    def memory_mb(self) -> float:
        return self.total_feature_bits / 8 / 1e6


def feature_memory_bits(
    model,
    graph,
    cfg: QuantConfig | None = None,
    attention_mode: str = "sparse_edges",
) -> MemoryReport:
    """Feature memory under a config (None = full precision) per the rules above."""
    if attention_mode not in ("sparse_edges", "dense_nxn"):
        raise ValueError(f"unknown attention mode {attention_mode!r}")
    degrees = graph.degrees()
    n = graph.num_nodes
    att_entries = n * n if attention_mode == "dense_nxn" else _model_edge_count(model, graph)
    per_layer = []
    depth = len(model.dims) - 1
    for k in range(1, depth + 1):
        d_in = model.dims[k - 1]
        if cfg is None:
            emb_bits = FP_BITS * n * d_in
        else:
            per_node = np.fromiter(
                (bits_for(cfg, k, COM, degree=int(d)) for d in degrees),
                dtype=np.int64,
                count=n,
            )
            emb_bits = int(per_node.sum()) * d_in
        layer_bits = emb_bits
        if model.stores_attention:
            b = FP_BITS if cfg is None else bits_for(cfg, k, ATT)
            layer_bits += b * att_entries
        per_layer.append(layer_bits)
    total = int(sum(per_layer))
    fp_total = total if cfg is None else feature_memory_bits(
        model, graph, None, attention_mode
    ).total_feature_bits
    return MemoryReport(
        total_feature_bits=total,
        per_layer_bits=tuple(per_layer),
        weight_bits=weight_memory_bits(model),
        average_bits=32.0 if cfg is None else average_bits(cfg, model, graph),
        saving_ratio_vs_fp32=fp_total / total,
    )


def weight_memory_bits(model) -> int:
    """32 bits per weight element; weights stay full precision."""
    return FP_BITS * sum(int(np.prod(p.value.shape)) for p in model.parameters())


def saving_ratio(full: MemoryReport, reduced: MemoryReport) -> float:
    return full.total_feature_bits / reduced.total_feature_bits


def format_number(x) -> str:
    """Fixed 6-significant-digit rendering for diffable CSV output."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".6g")


def metrics_row(config_id: str, avg_bits, memory_mb, saving, accuracy) -> str:
    return ",".join(
        [config_id] + [format_number(v) for v in (avg_bits, memory_mb, saving, accuracy)]
    )
