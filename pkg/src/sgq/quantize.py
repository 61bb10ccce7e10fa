"""Scalar/matrix quantization, calibration statistics, and STE fake-quantize.

A value x maps to the level floor((x - alpha_min) / scale), saturating at
the q-bit range ends, and is recovered as scale * level + alpha_min. The
fake-quantize op runs that round trip on the forward pass and passes the
upstream gradient through unchanged (straight-through estimator): the
scale factors of the recovery and of the level derivative cancel exactly,
so the Jacobian is the identity. Gradients pass through even for saturated
inputs; a clip-aware STE would be a possible extension.

Calibration is an exact min/max over a full-precision forward pass (no
percentile clipping), collected on the training graph per tensor group:
one (lo, hi) pair per (layer, component) and, when degree buckets are in
play, per (layer, com, bucket).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, _acc, _node

DEGENERATE_WIDTH = 1e-6


@dataclass(frozen=True)
class QuantParams:
    """Bit width and range statistics for one tensor group."""

    bits: int
    alpha_min: float
    alpha_max: float
    scale: float

    def __post_init__(self):
        if not 1 <= self.bits <= 16:
            raise ValueError(f"bits must be in [1, 16], got {self.bits}")
        if not self.alpha_max > self.alpha_min:
            raise ValueError("alpha_max must exceed alpha_min")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def num_levels(self) -> int:
        return 1 << self.bits

    @classmethod
    def from_range(cls, bits: int, alpha_min: float, alpha_max: float) -> "QuantParams":
        if alpha_max <= alpha_min:
            alpha_max = alpha_min + DEGENERATE_WIDTH
        return cls(bits, alpha_min, alpha_max, (alpha_max - alpha_min) / (1 << bits))


def calibrate(values, bits: int) -> QuantParams:
    """Min/max statistics of a value collection, as quantization params.

    A degenerate (constant) collection widens alpha_max by 1e-6 so the
    scale stays positive.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot calibrate on an empty collection")
    if not np.isfinite(arr).all():
        raise ValueError("calibration values must be finite")
    return QuantParams.from_range(bits, float(arr.min()), float(arr.max()))


def quantize(x, p: QuantParams):
    """Map values to integer levels in [0, 2^bits - 1], saturating."""
    levels = np.floor((np.asarray(x, dtype=np.float64) - p.alpha_min) / p.scale)
    levels = np.clip(levels, 0, p.num_levels - 1).astype(np.int64)
    return int(levels) if levels.ndim == 0 else levels


def dequantize(level, p: QuantParams):
    """Recover level -> scale * level + alpha_min."""
    lv = np.asarray(level)
    if lv.size and (lv.min() < 0 or lv.max() > p.num_levels - 1):
        raise ValueError(f"level out of [0, {p.num_levels - 1}]")
    out = p.scale * lv.astype(np.float64) + p.alpha_min
    return float(out) if out.ndim == 0 else out


def _round_trip(x: np.ndarray, p: QuantParams) -> np.ndarray:
    levels = np.clip(np.floor((x - x.dtype.type(p.alpha_min)) / x.dtype.type(p.scale)), 0, p.num_levels - 1)
    return (x.dtype.type(p.scale) * levels + x.dtype.type(p.alpha_min)).astype(x.dtype)


def fake_quantize(x: Tensor, p: QuantParams) -> Tensor:
    """Quantize-dequantize on the forward pass; identity on the backward."""
    out = _round_trip(x.value, p)
    return _node(out, (x,), lambda g: x.requires_grad and _acc(x, g))


def fake_quantize_grouped(x: Tensor, groups) -> Tensor:
    """Row-grouped fake quantization with one QuantParams per group.

    ``groups`` is a list of (row_indices, QuantParams); row index arrays
    must be disjoint. Rows not covered by any group pass through at full
    precision (empty degree buckets have nothing to calibrate).
    """
    out = x.value.copy()
    for rows, p in groups:
        if rows is None:
            out = _round_trip(x.value, p)
        elif len(rows):
            out[rows] = _round_trip(x.value[rows], p)
    return _node(out, (x,), lambda g: x.requires_grad and _acc(x, g))


class Calibration:
    """Per-group (lo, hi) range statistics from one full-precision pass.

    Keys are (layer, "att") for attention values and (layer, "com", bucket)
    for embedding rows, with bucket None when no degree bucketing applies.
    """

    def __init__(self, stats: dict):
        self.stats = dict(stats)

    def params(self, key, bits: int) -> QuantParams:
        lo, hi = self.stats[key]
        return QuantParams.from_range(bits, lo, hi)

    def __contains__(self, key):
        return key in self.stats
