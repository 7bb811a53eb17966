"""Optimization loop: AdamW with decoupled weight decay, per-epoch exponential
learning-rate decay, online augmentation, validation-IoU model selection.

Runs are bit-reproducible for a fixed config: the same seed drives model
initialization, epoch shuffling, and augmentation draws, and every reduction
is a deterministic numpy op.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .layers import Param
from .losses import LossWeights, build_supervision, total_loss
from .metrics import confusion, segmentation_metrics
from .model import ModelConfig, TwoBranchNet
from .patches import augment, extract_pairs, stack_pairs
from .postprocess import ZoneMask


@dataclass
class TrainConfig:
    lr0: float = 0.001
    decay: float = 0.99
    epochs: int = 300
    batch_size: int = 30
    seed: int = 0
    patch_size: int = 288
    stride: int = 144
    weights: LossWeights = field(default_factory=LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    use_augment: bool = True

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay ** epoch


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale defaults: 64-pixel patches, 30 epochs, batch 8."""
    base = dict(epochs=30, batch_size=8, patch_size=64, stride=32)
    base.update(overrides)
    return TrainConfig(**base)


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
               t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam update (bias-corrected moments).

    Returns (new_param, new_m, new_v); inputs are not modified.
    """
    param = param * (1.0 - lr * weight_decay)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class AdamW:
    """Stateful wrapper applying adamw_step to every model parameter."""

    def __init__(self, params: dict[str, Param], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c = self.cfg
        for k, p in self.params.items():
            p.data[...], self.m[k], self.v[k] = adamw_step(
                p.data, p.grad, self.m[k], self.v[k], self.t, lr,
                c.beta1, c.beta2, c.eps, c.weight_decay)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_total: float
    terms: dict[str, float]
    val_iou: float | None


@dataclass
class TrainReport:
    epochs: list[EpochStats]
    best_epoch: int
    best_val_iou: float | None
    wall_time_s: float

    @property
    def best_checkpoint_id(self) -> str:
        return f"epoch_{self.best_epoch:04d}" if self.best_epoch >= 0 else "init"

    TERM_COLUMNS = ("target", "context", "deep_1", "deep_2", "deep_3")

    def to_csv(self) -> str:
        cols = ",".join(f"loss_{t}" for t in self.TERM_COLUMNS)
        lines = [f"epoch,lr,loss_total,{cols},val_iou"]
        for s in self.epochs:
            terms = ",".join("" if t not in s.terms else f"{s.terms[t]:.10g}"
                             for t in self.TERM_COLUMNS)
            iou = "" if s.val_iou is None else f"{s.val_iou:.10g}"
            lines.append(f"{s.epoch},{s.lr:.10g},{s.loss_total:.10g},{terms},{iou}")
        return "\n".join(lines) + "\n"


def _scene_pairs(scenes, tcfg: TrainConfig):
    pairs = []
    for scene in scenes:
        pairs.extend(extract_pairs(scene, tcfg.patch_size, tcfg.stride))
    return pairs


def _forward_batches(model: TwoBranchNet, pairs, batch_size: int):
    """Eval-mode forward over pairs in order; yields (pred_labels, y_t)."""
    was_training = model.training
    model.set_training(False)
    try:
        for lo in range(0, len(pairs), batch_size):
            chunk = pairs[lo:lo + batch_size]
            t, c, y_t, _ = stack_pairs(chunk)
            outs = model.forward(t, None if model.context is None else c)
            yield outs.target_logits.argmax(axis=1), y_t
    finally:
        model.set_training(was_training)


def validation_iou(model: TwoBranchNet, pairs, batch_size: int) -> float | None:
    """Macro IoU of argmax target predictions pooled over all patches."""
    pooled = None
    for pred, y_t in _forward_batches(model, pairs, batch_size):
        counts = confusion(ZoneMask(pred.astype(np.uint8), 1.0),
                           ZoneMask(y_t.astype(np.uint8), 1.0))
        pooled = counts if pooled is None else pooled + counts
    if pooled is None:
        return None
    _, macro = segmentation_metrics(pooled)
    return macro.iou


def train(model_cfg: ModelConfig, train_scenes, val_scenes,
          tcfg: TrainConfig) -> tuple[TwoBranchNet, TrainReport]:
    """Full training run; returns the best-validation-IoU model and report."""
    started = time.perf_counter()
    train_pairs = _scene_pairs(train_scenes, tcfg)
    val_pairs = _scene_pairs(val_scenes, tcfg)
    if not train_pairs or not val_pairs:
        raise ConfigError("train and validation splits must both be non-empty")

    rng = np.random.default_rng(tcfg.seed)
    model = TwoBranchNet(model_cfg, seed=tcfg.seed)
    optimizer = AdamW(model.params(), tcfg)
    deep_depths = tuple(sorted(model.heads))

    best_epoch = -1
    best_iou = None
    best_state = {k: v.copy() for k, v in model.state_tensors().items()}

    stats: list[EpochStats] = []
    for epoch in range(tcfg.epochs):
        lr = tcfg.lr_at(epoch)
        order = rng.permutation(len(train_pairs))
        term_sums: dict[str, float] = {}
        total_sum = 0.0
        seen = 0
        model.set_training(True)
        for lo in range(0, len(order), tcfg.batch_size):
            chunk = [train_pairs[i] for i in order[lo:lo + tcfg.batch_size]]
            if tcfg.use_augment:
                chunk = [augment(p, rng) for p in chunk]
            t, c, y_t, y_c = stack_pairs(chunk)
            outs = model.forward(t, None if model.context is None else c)
            sup = build_supervision(y_t, y_c, deep_depths)
            res = total_loss(outs, sup, tcfg.weights, want_grads=True)
            for key, value in list(res.terms.items()) + [("total", res.total)]:
                if not np.isfinite(value):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, term '{key}'")
            model.zero_grad()
            model.backward(res.grads)
            optimizer.step(lr)
            n = len(chunk)
            seen += n
            total_sum += res.total * n
            for key, value in res.terms.items():
                term_sums[key] = term_sums.get(key, 0.0) + value * n

        val = validation_iou(model, val_pairs, tcfg.batch_size)
        stats.append(EpochStats(epoch=epoch, lr=lr, loss_total=total_sum / seen,
                                terms={k: v / seen for k, v in term_sums.items()},
                                val_iou=val))
        if val is not None and (best_iou is None or val > best_iou):
            best_iou = val
            best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_tensors().items()}

    for name, arr in model.state_tensors().items():
        arr[...] = best_state[name]
    report = TrainReport(epochs=stats, best_epoch=best_epoch, best_val_iou=best_iou,
                         wall_time_s=time.perf_counter() - started)
    return model, report
