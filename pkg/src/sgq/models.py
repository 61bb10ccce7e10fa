"""GCN, GAT-lite, and AGNN-lite forward passes, full-precision or quantized.

Each layer applies an attention component producing one scalar per directed
edge, then a combination component: a weighted neighbor sum followed by a
linear map. Attention is stored edge-sparse; a dense N x N attention matrix
is never materialized (the memory model offers a dense accounting mode
separately).

Quantized execution fake-quantizes the layer's input embeddings (per node
row, grouped by degree bucket when the config buckets degrees), computes
attention from those recovered values, fake-quantizes the attention scalars
after softmax normalization, and combines at full precision. In finetune
mode the quantization ops sit on the tape with straight-through gradients;
inference mode runs the same numerics without a tape.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .bitconfig import ATT, COM, NUM_BUCKETS, QuantConfig, bits_for
from .graph import CsrGraph, Dataset, add_self_loops
from .quantize import Calibration, QuantParams, fake_quantize, fake_quantize_grouped

SGQM_MAGIC = b"SGQM"
SGQM_VERSION = 1

LEAKY_SLOPE = 0.2
COSINE_EPS = 1e-12


class Arch(str, Enum):
    GCN = "gcn"
    GAT_LITE = "gat"
    AGNN_LITE = "agnn"


# hidden width and depth per architecture
ARCH_DEFAULTS = {
    Arch.GCN: (32, 2),
    Arch.GAT_LITE: (256, 2),
    Arch.AGNN_LITE: (16, 4),
}


@dataclass
class LayerWeights:
    """One layer's parameters: combination matrix plus arch-specific attention."""

    w_com: Tensor
    w_att: Tensor | None = None  # (2*D_in, 1) for GAT-lite, (1, 1) beta for AGNN-lite


@dataclass
class GnnModel:
    arch: Arch
    layers: list[LayerWeights]
    dims: tuple[int, ...]  # D0 .. Dn
    normalize_features: bool = True
    add_self_loops: bool = True
    raw_ones_attention: bool = False  # GCN variant with all-ones constant attention

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def stores_attention(self) -> bool:
        """GCN's constant attention is never stored; GAT/AGNN attention is."""
        return self.arch is not Arch.GCN

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.layers:
            ps.append(layer.w_com)
            if layer.w_att is not None:
                ps.append(layer.w_att)
        return ps

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def copy(self) -> "GnnModel":
        layers = [
            LayerWeights(
                ad.tensor(l.w_com.value.copy(), dtype=l.w_com.dtype),
                None if l.w_att is None else ad.tensor(l.w_att.value.copy(), dtype=l.w_att.dtype),
            )
            for l in self.layers
        ]
        return GnnModel(
            self.arch, layers, self.dims,
            self.normalize_features, self.add_self_loops, self.raw_ones_attention,
        )


def _glorot(rng, rows: int, cols: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype)


def build_model(
    arch: Arch | str,
    in_dim: int,
    num_classes: int,
    hidden: int | None = None,
    depth: int | None = None,
    seed: int = 0,
    dtype=np.float32,
    **flags,
) -> GnnModel:
    """Seeded Glorot-initialized model with per-arch default width/depth."""
    arch = Arch(arch)
    default_hidden, default_depth = ARCH_DEFAULTS[arch]
    hidden = default_hidden if hidden is None else hidden
    depth = default_depth if depth is None else depth
    if depth < 1:
        raise ValueError("depth must be at least 1")
    dims = (in_dim, *([hidden] * (depth - 1)), num_classes)
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(depth):
        w_com = ad.tensor(_glorot(rng, dims[k], dims[k + 1], dtype), dtype=dtype)
        w_att = None
        if arch is Arch.GAT_LITE:
            w_att = ad.tensor(_glorot(rng, 2 * dims[k], 1, dtype), dtype=dtype)
        elif arch is Arch.AGNN_LITE:
            w_att = ad.tensor(np.ones((1, 1), dtype=dtype), dtype=dtype)
        layers.append(LayerWeights(w_com, w_att))
    return GnnModel(arch, layers, dims, **flags)


@contextmanager
def no_grad(model: GnnModel):
    """Run forward passes without building a tape (single-thread ownership).

    Only the requires_grad flags are toggled; any gradients already
    accumulated on the parameters stay untouched.
    """
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


@dataclass
class EdgeAttention:
    """Per-edge attention scalars aligned with the context's CSR edge order."""

    values: Tensor  # (E,)


class GraphContext:
    """Prepared per (model flags, dataset): edge arrays and cached index maps."""

    def __init__(self, model: GnnModel, dataset: Dataset):
        if dataset.input_dim != model.dims[0]:
            raise ValueError(
                f"dataset feature dim {dataset.input_dim} does not match model input {model.dims[0]}"
            )
        self.dataset = dataset
        graph = dataset.graph
        self.raw_degrees = graph.degrees()
        if model.add_self_loops:
            graph = add_self_loops(graph)
        self.graph = graph
        self.num_nodes = graph.num_nodes
        self.src, self.dst = graph.edge_endpoints()
        self.row_ptr = graph.row_ptr
        # transpose ordering: edges sorted by (src, dst), for the backward scatter
        self.t_perm = np.lexsort((self.dst, self.src))
        t_counts = np.bincount(self.src, minlength=self.num_nodes)
        self.t_row_ptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(t_counts, out=self.t_row_ptr[1:])
        self.t_col = self.dst[self.t_perm]
        # stored (quantizable) features stay raw; row normalization is layer-1 compute
        self.features = dataset.features.astype(np.float32, copy=True)
        deg = graph.degrees().astype(np.float64)
        with np.errstate(divide="ignore"):
            inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
        if model.raw_ones_attention:
            self.gcn_att = np.ones(graph.num_edges, dtype=np.float32)
        else:
            self.gcn_att = (inv_sqrt[self.src] * inv_sqrt[self.dst]).astype(np.float32)
        self._bucket_rows: dict = {}

    def bucket_rows(self, buckets) -> list[np.ndarray]:
        """Node index arrays per degree bucket (raw degrees, pre self-loop)."""
        key = buckets.split_points
        if key not in self._bucket_rows:
            idx = buckets.bucket_of(self.raw_degrees)
            self._bucket_rows[key] = [
                np.flatnonzero(idx == j) for j in range(NUM_BUCKETS)
            ]
        return self._bucket_rows[key]


def gather_weighted_sum(weights: Tensor, h: Tensor, ctx: GraphContext) -> Tensor:
    """out[v] = sum over incoming edges e=(u -> v) of w_e * h[u].

    The aggregation runs as a sparse-matrix product over the CSR structure;
    gradients: dL/dh[u] = sum_e w_e dL/dout[dst_e], dL/dw_e = dL/dout[dst_e] . h[src_e],
    which is exactly the attention gradient of the combination component.
    """
    w = weights.value
    n = ctx.num_nodes
    mat = sp.csr_matrix((w, ctx.graph.col_idx, ctx.row_ptr), shape=(n, n))
    out = mat @ h.value

    def bw(g):
        if h.requires_grad:
            mat_t = sp.csr_matrix((w[ctx.t_perm], ctx.t_col, ctx.t_row_ptr), shape=(n, n))
            ad._acc(h, mat_t @ g)
        if weights.requires_grad:
            dw = np.einsum("ed,ed->e", g[ctx.dst], h.value[ctx.src])
            ad._acc(weights, dw.astype(w.dtype))

    return ad._node(out, (weights, h), bw)


def edge_softmax(scores: Tensor, ctx: GraphContext) -> Tensor:
    """Softmax of edge scores over each destination's in-neighborhood."""
    n = ctx.num_nodes
    # max-shift per neighborhood; a constant shift leaves the softmax gradient intact
    shift = np.zeros(n, dtype=scores.value.dtype)
    nonempty = np.flatnonzero(np.diff(ctx.row_ptr) > 0)
    if len(nonempty):
        shift[nonempty] = np.maximum.reduceat(scores.value, ctx.row_ptr[nonempty])
    z = ad.exp(ad.add(scores, -shift[ctx.dst]))
    denom = ad.segment_sum(z, ctx.dst, n)
    return ad.div(z, ad.gather_rows(denom, ctx.dst))


def _attention_scores(model: GnnModel, layer_index: int, h: Tensor, ctx: GraphContext) -> Tensor:
    """Pre-normalization per-edge score (the stored attention quantity)."""
    layer = model.layers[layer_index]
    if h.value.shape[0] != ctx.num_nodes:
        raise ValueError("embedding row count must equal num_nodes")
    if model.arch is Arch.GAT_LITE:
        d = h.value.shape[1]
        if layer.w_att.value.shape != (2 * d, 1):
            raise ValueError(
                f"attention vector shape {layer.w_att.value.shape} does not match 2x{d}"
            )
        # a^T [h_u || h_v] split into the source and destination halves
        s_src = ad.matmul(h, ad.slice_rows(layer.w_att, 0, d))
        s_dst = ad.matmul(h, ad.slice_rows(layer.w_att, d, 2 * d))
        scores = ad.add(
            ad.reshape(ad.gather_rows(s_src, ctx.src), (-1,)),
            ad.reshape(ad.gather_rows(s_dst, ctx.dst), (-1,)),
        )
        return ad.leaky_relu(scores, LEAKY_SLOPE)
    # AGNN-lite: beta * cos(h_u, h_v)
    norms = ad.sqrt(ad.add_scalar(ad.row_sum(ad.mul(h, h)), COSINE_EPS))
    hn = ad.div(h, norms)
    cos = ad.row_sum(ad.mul(ad.gather_rows(hn, ctx.src), ad.gather_rows(hn, ctx.dst)))
    return ad.reshape(ad.mul(cos, layer.w_att), (-1,))


def attention_forward(
    model: GnnModel,
    layer_index: int,
    h: Tensor,
    ctx: GraphContext,
    quant: "QuantParams | None" = None,
) -> EdgeAttention:
    """Per-edge attention for one layer (layer_index is 0-based).

    GCN uses the symmetric-normalized constant 1/sqrt(d_u d_v) (or all ones
    with the raw_ones flag) and never stores attention. GAT-lite scores
    concatenated endpoint embeddings through a leaky-ReLU single-layer net;
    AGNN-lite scales the endpoint cosine similarity by a trained scalar;
    both normalize scores by softmax over each in-neighborhood.

    Quantization applies to the stored quantity, the raw edge score, before
    the softmax: the normalization is shift- and scale-tolerant, so coarse
    widths degrade gracefully, and the recovered attention rows still sum
    to one exactly.
    """
    if model.arch is Arch.GCN:
        return EdgeAttention(Tensor(ctx.gcn_att.astype(h.value.dtype)))
    scores = _attention_scores(model, layer_index, h, ctx)
    if quant is not None:
        scores = fake_quantize(scores, quant)
    return EdgeAttention(edge_softmax(scores, ctx))


def combine_forward(h: Tensor, att: EdgeAttention, ctx: GraphContext, w_com: Tensor) -> Tensor:
    """Weighted neighbor sum followed by the combination linear map."""
    return ad.matmul(gather_weighted_sum(att.values, h, ctx), w_com)


def _normalize_rows(h: Tensor) -> Tensor:
    """Scale each row to unit sum; all-zero rows pass through unchanged.

    Applied after the layer-0 fake-quantize: storage holds the raw input
    features (binary bag-of-words for the citation benchmarks, which low
    bit widths represent almost exactly), and the row scaling is part of
    the first layer's arithmetic. For uniform rows the quantization scale
    cancels in the division.
    """
    sums = ad.row_sum(h)
    safe = ad.add(sums, (sums.value == 0).astype(h.value.dtype))
    return ad.div(h, safe)


MAX_QUANT_BITS = 16  # wider widths (e.g. 32) mean full-precision storage


def _com_groups(cfg: QuantConfig, calibration: Calibration, ctx: GraphContext, k: int):
    """(rows, params) groups for layer k's input embeddings."""
    if cfg.granularity.per_bucket:
        groups = []
        for j, rows in enumerate(ctx.bucket_rows(cfg.buckets)):
            if len(rows) == 0 or (k, COM, j) not in calibration:
                continue
            b = cfg.bits[f"{k}/{COM}/{j}"]
            if b <= MAX_QUANT_BITS:
                groups.append((rows, calibration.params((k, COM, j), b)))
        return groups
    b = bits_for(cfg, k, COM, degree=0)
    if b > MAX_QUANT_BITS:
        return []
    return [(None, calibration.params((k, COM, None), b))]


def forward(
    model: GnnModel,
    data: Dataset | GraphContext,
    cfg: QuantConfig | None = None,
    calibration: Calibration | None = None,
) -> Tensor:
    """Log-softmax class scores for every node.

    cfg None runs full precision. A quantized run needs range statistics;
    they are collected on the fly when not supplied. The tape is built
    exactly when some model parameter requires gradients.
    """
    ctx = data if isinstance(data, GraphContext) else GraphContext(model, data)
    if cfg is not None and cfg.granularity.per_layer and cfg.depth != model.depth:
        raise ValueError(f"config depth {cfg.depth} does not match model depth {model.depth}")
    if cfg is not None and calibration is None:
        calibration = collect_calibration(model, ctx, cfg.buckets)
    h = Tensor(ctx.features)
    for k0, layer in enumerate(model.layers):
        k = k0 + 1
        if cfg is not None:
            h = fake_quantize_grouped(h, _com_groups(cfg, calibration, ctx, k))
        if k0 == 0 and model.normalize_features:
            h = _normalize_rows(h)
        att_quant = None
        if cfg is not None and model.stores_attention:
            b = bits_for(cfg, k, ATT)
            if b <= MAX_QUANT_BITS:
                att_quant = calibration.params((k, ATT), b)
        att = attention_forward(model, k0, h, ctx, att_quant)
        h = combine_forward(h, att, ctx, layer.w_com)
        if k0 < model.depth - 1:
            h = ad.relu(h)
    return ad.log_softmax_rows(h)


def collect_calibration(model: GnnModel, data: Dataset | GraphContext, buckets=None) -> Calibration:
    """Range statistics from a single full-precision forward pass."""
    ctx = data if isinstance(data, GraphContext) else GraphContext(model, data)
    stats = {}
    with no_grad(model):
        h = Tensor(ctx.features)
        for k0, layer in enumerate(model.layers):
            k = k0 + 1
            hv = h.value
            if buckets is None:
                stats[(k, COM, None)] = (float(hv.min()), float(hv.max()))
            else:
                for j, rows in enumerate(ctx.bucket_rows(buckets)):
                    if len(rows):
                        stats[(k, COM, j)] = (float(hv[rows].min()), float(hv[rows].max()))
            if k0 == 0 and model.normalize_features:
                h = _normalize_rows(h)
            if model.stores_attention:
                scores = _attention_scores(model, k0, h, ctx)
                stats[(k, ATT)] = (float(scores.value.min()), float(scores.value.max()))
                att = EdgeAttention(edge_softmax(scores, ctx))
            else:
                att = attention_forward(model, k0, h, ctx)
            h = combine_forward(h, att, ctx, layer.w_com)
            if k0 < model.depth - 1:
                h = ad.relu(h)
    return Calibration(stats)


_ARCH_TAGS = {Arch.GCN: 0, Arch.GAT_LITE: 1, Arch.AGNN_LITE: 2}
_TAGS_ARCH = {v: k for k, v in _ARCH_TAGS.items()}


def save_checkpoint(model: GnnModel, path) -> None:
    """SGQM container: arch tag, depth, dims, then each weight matrix."""
    with open(path, "wb") as f:
        f.write(SGQM_MAGIC)
        f.write(struct.pack("<3I", SGQM_VERSION, _ARCH_TAGS[model.arch], model.depth))
        f.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
        for layer in model.layers:
            mats = [layer.w_com] + ([layer.w_att] if layer.w_att is not None else [])
            for m in mats:
                rows, cols = m.value.shape
                f.write(struct.pack("<2I", rows, cols))
                f.write(np.ascontiguousarray(m.value, dtype="<f4").tobytes())


def load_checkpoint(path) -> GnnModel:
    with open(path, "rb") as f:
        if f.read(4) != SGQM_MAGIC:
            raise ValueError("bad checkpoint magic")
        version, tag, depth = struct.unpack("<3I", f.read(12))
        if version != SGQM_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = _TAGS_ARCH[tag]
        dims = struct.unpack(f"<{depth + 1}I", f.read(4 * (depth + 1)))

        def read_matrix():
            rows, cols = struct.unpack("<2I", f.read(8))
            data = np.frombuffer(f.read(4 * rows * cols), dtype="<f4").reshape(rows, cols)
            return ad.tensor(data.astype(np.float32))

        layers = []
        for _ in range(depth):
            w_com = read_matrix()
            w_att = None if arch is Arch.GCN else read_matrix()
            layers.append(LayerWeights(w_com, w_att))
    return GnnModel(arch, layers, tuple(int(d) for d in dims))
