"""Bit-assignment configurations over (layer, component, degree bucket).

A configuration maps quantization bit widths onto the tensor groups a
granularity distinguishes:

  uniform       one global width
  lwq           one width per layer
  cwq           one width per component (attention vs combination)
  lwq_cwq       per layer and component
  lwq_cwq_taq   per layer and component, with the combination side further
                split by the node's degree bucket (attention never varies
                by bucket)

Internally the bit map uses slot keys "k/component/bucket" with "*" for
axes the granularity collapses, e.g. "2/com/*" or "*/*/*". The JSON config
file carries the same keys.

Degree buckets are [D0, D1), [D1, D2), [D2, D3), [D3, inf) with D0 = 0;
bucketing always uses the raw topological degree, before any self-loop
insertion. The default split points are the graph's degree quartiles and
the default per-bucket width template assigns higher bits to low-degree
nodes; both are declared assumptions, surfaced in config files rather than
hard-coded.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

BIT_TEMPLATE = (1, 2, 4, 8, 16)
FBIT_TEMPLATE = (4, 3, 2, 1)
NUM_BUCKETS = 4

ATT = "att"
COM = "com"


class ConfigError(ValueError):
    """A config file or bit assignment is malformed."""


class Granularity(str, Enum):
    UNIFORM = "uniform"
    LWQ = "lwq"
    CWQ = "cwq"
    LWQ_CWQ = "lwq_cwq"
    LWQ_CWQ_TAQ = "lwq_cwq_taq"

    @property
    def per_layer(self) -> bool:
        return self in (Granularity.LWQ, Granularity.LWQ_CWQ, Granularity.LWQ_CWQ_TAQ)

    @property
    def per_component(self) -> bool:
        return self in (Granularity.CWQ, Granularity.LWQ_CWQ, Granularity.LWQ_CWQ_TAQ)

    @property
    def per_bucket(self) -> bool:
        return self is Granularity.LWQ_CWQ_TAQ


@dataclass(frozen=True)
class DegreeBuckets:
    """Three split points partitioning degrees into four buckets."""

    split_points: tuple[int, int, int]

    def __post_init__(self):
        d1, d2, d3 = self.split_points
        if not 0 < d1 < d2 < d3:
            raise ValueError(f"split points must satisfy 0 < D1 < D2 < D3, got {self.split_points}")

    def bucket_of(self, degree):
        """Bucket index (0..3) of a degree or degree array."""
        return np.searchsorted(np.asarray(self.split_points), degree, side="right")

    @classmethod
    def from_degrees(cls, degrees) -> "DegreeBuckets":
        """Quartile split points, rounded up and made strictly increasing."""
        qs = np.percentile(np.asarray(degrees, dtype=np.float64), [25, 50, 75])
        pts = []
        prev = 0
        for q in qs:
            p = max(int(np.ceil(q)), prev + 1)
            pts.append(p)
            prev = p
        return cls(tuple(pts))


def fbit(degree: int, buckets: DegreeBuckets, template) -> int:
    """Degree-to-bits mapping: wider widths for low-degree nodes."""
    template = tuple(template)
    if len(template) != NUM_BUCKETS:
        raise ValueError("fbit template must list one width per bucket")
    if any(template[i] < template[i + 1] for i in range(len(template) - 1)):
        raise ValueError(f"fbit template must be non-increasing, got {template}")
    return template[int(buckets.bucket_of(degree))]


def _slot(layer, component, bucket) -> str:
    return f"{layer}/{component}/{bucket}"


def slot_keys(granularity: Granularity, depth: int) -> list[str]:
    """Slot keys in canonical order: layer-major, att before com, bucket ascending."""
    g = granularity
    layers = range(1, depth + 1) if g.per_layer else ["*"]
    keys = []
    for k in layers:
        comps = (ATT, COM) if g.per_component else ["*"]
        for comp in comps:
            if g.per_bucket and comp == COM:
                keys.extend(_slot(k, comp, j) for j in range(NUM_BUCKETS))
            else:
                keys.append(_slot(k, comp, "*"))
    return keys


@dataclass(frozen=True)
class QuantConfig:
    """A complete bit assignment; immutable and hashable via its canonical form."""

    granularity: Granularity
    bits: dict = field(compare=False)
    template: tuple = BIT_TEMPLATE
    buckets: DegreeBuckets | None = None
    _canonical: str = field(default="", compare=True)

    def __post_init__(self):
        depth = self.depth
        expected = slot_keys(self.granularity, depth or 1)
        if set(self.bits) != set(expected):
            raise ConfigError(
                f"bit slots {sorted(self.bits)} do not match the "
                f"{self.granularity.value} slot set {expected}"
            )
        for key, b in self.bits.items():
            if b not in self.template:
                raise ConfigError(f"bits {b} at {key} not in template {list(self.template)}")
        if self.granularity.per_bucket and self.buckets is None:
            raise ConfigError("degree-bucketed config needs split points")
        splits = self.buckets.split_points if self.buckets else ()
        key = "|".join(
            [
                self.granularity.value,
                ",".join(map(str, self.template)),
                ",".join(map(str, splits)),
                ";".join(f"{k}={self.bits[k]}" for k in expected),
            ]
        )
        object.__setattr__(self, "_canonical", key)

    @property
    def depth(self) -> int | None:
        """Number of layers the config distinguishes (None if layer-collapsed)."""
        if not self.granularity.per_layer:
            return None
        return max(int(k.split("/")[0]) for k in self.bits)

    def __hash__(self):
        return hash(self._canonical)

    def canonical(self) -> str:
        return self._canonical


def config_id(cfg: QuantConfig) -> str:
    """Short stable identifier derived from the canonical serialized form."""
    return hashlib.sha256(cfg.canonical().encode()).hexdigest()[:12]


def bits_for(cfg: QuantConfig, layer: int, component: str, degree: int | None = None) -> int:
    """Resolve the width for a (layer, component, degree) query.

    Axes the granularity does not distinguish are ignored; degree is only
    consulted for the combination component of a degree-bucketed config.
    """
    if component not in (ATT, COM):
        raise ValueError(f"component must be '{ATT}' or '{COM}'")
    g = cfg.granularity
    k = layer if g.per_layer else "*"
    comp = component if g.per_component else "*"
    bucket = "*"
    if g.per_bucket and component == COM:
        if degree is None:
            raise ValueError("degree-bucketed config needs a degree for the com component")
        bucket = int(cfg.buckets.bucket_of(degree))
    key = _slot(k, comp, bucket)
    if key not in cfg.bits:
        raise IndexError(f"layer {layer} out of range for this config")
    return cfg.bits[key]


def uniform_config(q: int, template=BIT_TEMPLATE) -> QuantConfig:
    return QuantConfig(Granularity.UNIFORM, {_slot("*", "*", "*"): q}, tuple(template))


def lwq_config(layer_bits, template=BIT_TEMPLATE) -> QuantConfig:
    bits = {_slot(k, "*", "*"): q for k, q in enumerate(layer_bits, start=1)}
    return QuantConfig(Granularity.LWQ, bits, tuple(template))


def cwq_config(q_att: int, q_com: int, template=BIT_TEMPLATE) -> QuantConfig:
    bits = {_slot("*", ATT, "*"): q_att, _slot("*", COM, "*"): q_com}
    return QuantConfig(Granularity.CWQ, bits, tuple(template))


def lwq_cwq_config(layer_pairs, template=BIT_TEMPLATE) -> QuantConfig:
    """layer_pairs: per-layer (q_att, q_com)."""
    bits = {}
    for k, (qa, qc) in enumerate(layer_pairs, start=1):
        bits[_slot(k, ATT, "*")] = qa
        bits[_slot(k, COM, "*")] = qc
    return QuantConfig(Granularity.LWQ_CWQ, bits, tuple(template))


def lwq_cwq_taq_config(att_bits, com_bucket_bits, buckets: DegreeBuckets, template=BIT_TEMPLATE) -> QuantConfig:
    """att_bits: per-layer attention widths; com_bucket_bits: per-layer 4-width lists."""
    bits = {}
    for k, qa in enumerate(att_bits, start=1):
        bits[_slot(k, ATT, "*")] = qa
    for k, per_bucket in enumerate(com_bucket_bits, start=1):
        if len(per_bucket) != NUM_BUCKETS:
            raise ConfigError("com widths must list one value per bucket")
        for j, q in enumerate(per_bucket):
            bits[_slot(k, COM, j)] = q
    return QuantConfig(Granularity.LWQ_CWQ_TAQ, bits, tuple(template), buckets)


@dataclass(frozen=True)
class ConfigSpace:
    """The sampling space for one search: granularity, depth, template, buckets."""

    granularity: Granularity
    depth: int
    template: tuple = BIT_TEMPLATE
    buckets: DegreeBuckets | None = None

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if not self.template:
            raise ValueError("template must be non-empty")
        if self.granularity.per_bucket and self.buckets is None:
            raise ValueError("degree-bucketed space needs split points")

    @property
    def slots(self) -> list[str]:
        return slot_keys(self.granularity, self.depth)

    @property
    def size(self) -> int:
        return len(self.template) ** len(self.slots)


def random_config(space: ConfigSpace, rng) -> QuantConfig:
    """Draw every slot uniformly from the template; deterministic per rng state."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    bits = {key: space.template[rng.integers(len(space.template))] for key in space.slots}
    return QuantConfig(space.granularity, bits, space.template, space.buckets)


def encode_features(cfg: QuantConfig) -> np.ndarray:
    """Flatten the bit slots in canonical order, as cost-model features."""
    keys = slot_keys(cfg.granularity, cfg.depth or 1)
    return np.array([cfg.bits[k] for k in keys], dtype=np.float64)


def average_bits(cfg: QuantConfig | None, model, graph) -> float:
    """Element-count-weighted mean width over all quantized feature groups.

    Element counts follow the memory accounting: one embedding entry per
    node and input dimension at each layer, one attention entry per
    directed edge per layer for architectures that store attention. A None
    config means full precision (32 everywhere).
    """
    total_bits = 0
    total_elems = 0
    degrees = graph.degrees()
    num_edges = _model_edge_count(model, graph)
    depth = len(model.dims) - 1
    for k in range(1, depth + 1):
        d_in = model.dims[k - 1]
        if cfg is not None and cfg.granularity.per_bucket:
            bucket_idx = cfg.buckets.bucket_of(degrees)
            for j in range(NUM_BUCKETS):
                n_j = int(np.sum(bucket_idx == j))
                if n_j == 0:
                    continue
                b = cfg.bits[_slot(k if cfg.granularity.per_layer else "*", COM, j)]
                total_bits += b * n_j * d_in
                total_elems += n_j * d_in
        else:
            b = 32 if cfg is None else bits_for(cfg, k, COM, degree=0)
            total_bits += b * graph.num_nodes * d_in
            total_elems += graph.num_nodes * d_in
        if model.stores_attention:
            b = 32 if cfg is None else bits_for(cfg, k, ATT)
            total_bits += b * num_edges
            total_elems += num_edges
    return total_bits / total_elems


def _model_edge_count(model, graph) -> int:
    """Directed edge count as the model sees the graph (with optional self loops)."""
    if not model.add_self_loops:
        return graph.num_edges
    src, dst = graph.edge_endpoints()
    existing_loops = int(np.sum(src == dst))
    return graph.num_edges + graph.num_nodes - existing_loops


def serialize(cfg: QuantConfig) -> str:
    """Canonical JSON text for a config; parse() inverts it exactly."""
    obj = {
        "granularity": cfg.granularity.value,
        "template": list(cfg.template),
        "bits": {k: int(v) for k, v in cfg.bits.items()},
    }
    if cfg.buckets is not None:
        obj["split_points"] = list(cfg.buckets.split_points)
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def parse(text: str) -> QuantConfig:
    """Parse and validate a config file; unknown keys and foreign bits are rejected."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config file: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a JSON object")
    allowed = {"granularity", "template", "split_points", "bits"}
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for required in ("granularity", "template", "bits"):
        if required not in obj:
            raise ConfigError(f"config file missing '{required}'")
    try:
        gran = Granularity(obj["granularity"])
    except ValueError:
        raise ConfigError(f"unknown granularity {obj['granularity']!r}") from None
    template = tuple(int(t) for t in obj["template"])
    buckets = None
    if "split_points" in obj:
        pts = obj["split_points"]
        if len(pts) != 3:
            raise ConfigError("split_points must list exactly three degrees")
        try:
            buckets = DegreeBuckets(tuple(int(p) for p in pts))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if gran.per_bucket and buckets is None:
        raise ConfigError("degree-bucketed config needs split_points")
    bits_raw = obj["bits"]
    if not isinstance(bits_raw, dict):
        raise ConfigError("'bits' must map slot keys to widths")
    bits = {}
    for key, val in bits_raw.items():
        parts = str(key).split("/")
        if len(parts) != 3:
            raise ConfigError(f"slot key {key!r} is not 'layer/component/bucket'")
        if not isinstance(val, int):
            raise ConfigError(f"bits at {key!r} must be an integer")
        bits[key] = val
    try:
        return QuantConfig(gran, bits, template, buckets)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e
