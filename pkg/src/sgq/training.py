"""Full-precision training, quantized finetuning, and evaluation.

Optimization is adaptive moment estimation on the negative log-likelihood
over the training mask, with L2 weight decay folded into the gradient and
early stopping on validation accuracy. The returned model always carries
the best-validation weights observed. Everything is deterministic for a
fixed seed; one training run owns one thread and its own RNG.

During finetuning only the features are quantized; weights stay full
precision and are optimized through the straight-through-estimator ops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bitconfig import QuantConfig
from .graph import Dataset
from .models import GnnModel, GraphContext, collect_calibration, forward, no_grad
from .quantize import Calibration


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


FINETUNE_LR = 3e-3


@dataclass(frozen=True)
class TrainParams:
    epochs: int = 200
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    seed: int = 0
    early_stop_patience: int = 20

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def for_finetune(cls, **overrides) -> "TrainParams":
        """Finetune defaults: a gentler step keeps high-bit configs at the
        full-precision optimum while still recovering low-bit accuracy."""
        overrides.setdefault("learning_rate", FINETUNE_LR)
        return cls(**overrides)


class Adam:
    """Standard bias-corrected Adam; state lives in the parameter dtype."""

    def __init__(self, params, lr=0.01, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if self.weight_decay:
                g = g + p.value.dtype.type(self.weight_decay) * p.value
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * (g * g)
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


def _accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    rows = np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("empty mask")
    pred = logits[rows].argmax(axis=1)
    return float(np.mean(pred == labels[rows]))


def _resolve_mask(dataset: Dataset, mask) -> np.ndarray:
    if isinstance(mask, str):
        try:
            return {"train": dataset.train_mask, "val": dataset.val_mask, "test": dataset.test_mask}[mask]
        except KeyError:
            raise ValueError(f"unknown mask {mask!r}") from None
    return np.asarray(mask, dtype=bool)


def evaluate(
    model: GnnModel,
    data: Dataset | GraphContext,
    cfg: QuantConfig | None = None,
    mask="test",
    calibration: Calibration | None = None,
) -> float:
    """Argmax-of-logits match rate over the masked nodes. Pure."""
    ctx = data if isinstance(data, GraphContext) else GraphContext(model, data)
    dataset = ctx.dataset
    with no_grad(model):
        logits = forward(model, ctx, cfg, calibration)
    return _accuracy(logits.value, dataset.labels, _resolve_mask(dataset, mask))


def _val_metrics(model, ctx, cfg, calibration, dataset) -> tuple[float, float]:
    """(accuracy, nll loss) on the validation mask from one inference pass."""
    with no_grad(model):
        logits = forward(model, ctx, cfg, calibration)
    acc = _accuracy(logits.value, dataset.labels, dataset.val_mask)
    loss = float(ad.nll_loss(logits, dataset.labels, dataset.val_mask).value)
    return acc, loss


def _optimize(
    model: GnnModel,
    dataset: Dataset,
    params: TrainParams,
    cfg: QuantConfig | None,
    calibration: Calibration | None,
) -> tuple[GnnModel, float, float]:
    """Shared loop behind training and finetuning.

    Returns the best-validation checkpoint: highest validation accuracy,
    accuracy ties broken by lower validation loss (tiny or saturated
    validation sets would otherwise pin the initial weights), remaining
    ties by earlier epoch. The patience counter watches accuracy only.
    """
    ctx = GraphContext(model, dataset)
    if cfg is not None and calibration is None:
        calibration = collect_calibration(model, ctx, cfg.buckets)
    best_val, best_val_loss = _val_metrics(model, ctx, cfg, calibration, dataset)
    best_weights = [p.value.copy() for p in model.parameters()]
    model.set_requires_grad(True)
    opt = Adam(model.parameters(), lr=params.learning_rate, weight_decay=params.weight_decay)
    since_best = 0
    try:
        for epoch in range(params.epochs):
            logits = forward(model, ctx, cfg, calibration)
            loss = ad.nll_loss(logits, dataset.labels, dataset.train_mask)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(epoch)
            ad.backward(loss, model.parameters())
            opt.step()
            val, val_loss = _val_metrics(model, ctx, cfg, calibration, dataset)
            if val > best_val or (val == best_val and val_loss < best_val_loss):
                best_weights = [p.value.copy() for p in model.parameters()]
                best_val_loss = val_loss
            if val > best_val:
                best_val = val
                since_best = 0
            else:
                since_best += 1
                if since_best >= params.early_stop_patience:
                    break
    finally:
        model.set_requires_grad(False)
    for p, w in zip(model.parameters(), best_weights):
        p.value = w
    test = evaluate(model, ctx, cfg, "test", calibration)
    return model, best_val, test


def train_full_precision(
    model: GnnModel, dataset: Dataset, params: TrainParams
) -> tuple[GnnModel, float, float]:
    """Train in place from the model's current weights; returns (model, val, test)."""
    return _optimize(model, dataset, params, None, None)


def finetune_quantized(
    model: GnnModel,
    dataset: Dataset,
    cfg: QuantConfig,
    params: TrainParams,
    calibration: Calibration | None = None,
) -> tuple[GnnModel, float, float]:
    """Finetune a copy of a trained model through the quantized forward.

    Range statistics are calibrated once, on the trained full-precision
    model, before any weight moves. epochs=0 reports the direct-quantization
    baseline (no recovery).
    """
    work = model.copy()
    if calibration is None:
        calibration = collect_calibration(work, GraphContext(work, dataset), cfg.buckets)
    return _optimize(work, dataset, params, cfg, calibration)
