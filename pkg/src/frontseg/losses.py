"""Joint training objective: cross-entropy + soft Dice per branch, plus the
deep-supervision pyramid terms, combined with three lambda coefficients.

Every loss value comes with its logits gradient so the trainer needs a single
pass. Labels are zone ids in {0..3}; logits are (N, 4, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError
from .layers import softmax, softmax_backward

DICE_EPS = 1e-6


@dataclass
class LossWeights:
    """Coefficients for the target, context, and deep-supervision terms."""
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5


@dataclass
class SupervisionBundle:
    """Ground truth for one batch: per-branch labels plus the downsampled
    pyramid matching the deep-supervision logit sizes."""
    y_t: np.ndarray
    y_c: np.ndarray
    pyramid: dict[int, np.ndarray] = field(default_factory=dict)


def build_supervision(y_t: np.ndarray, y_c: np.ndarray,
                      deep_depths: tuple[int, ...] = ()) -> SupervisionBundle:
    """Nearest-neighbor subsample y_t by 2^(4-D) for each supervised depth."""
    pyramid = {d: np.ascontiguousarray(y_t[:, ::2 ** (4 - d), ::2 ** (4 - d)])
               for d in deep_depths}
    return SupervisionBundle(y_t=y_t, y_c=y_c, pyramid=pyramid)


def _check_labels(logits: np.ndarray, labels: np.ndarray):
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (N, C, H, W), got {logits.shape}")
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise DataError(f"labels outside 0..{c - 1}: "
                        f"range [{labels.min()}, {labels.max()}]")


def _one_hot(labels: np.ndarray, c: int, dtype) -> np.ndarray:
    out = np.zeros((labels.shape[0], c) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None], 1.0, axis=1)
    return out


def cross_entropy_with_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean pixel negative log-likelihood and its logits gradient."""
    _check_labels(logits, labels)
    n, c, h, w = logits.shape
    p = softmax(logits, axis=1)
    picked = np.take_along_axis(p, labels[:, None], axis=1)[:, 0]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = (p - _one_hot(labels, c, p.dtype)) / (n * h * w)
    return loss, grad


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    return cross_entropy_with_grad(logits, labels)[0]


def dice_loss_with_grad(logits: np.ndarray, labels: np.ndarray):
    """1 - macro-averaged soft Dice over all classes (smoothing DICE_EPS)."""
    _check_labels(logits, labels)
    n, c, h, w = logits.shape
    p = softmax(logits, axis=1)
    g = _one_hot(labels, c, p.dtype)
    inter = (p * g).sum(axis=(0, 2, 3))
    psum = p.sum(axis=(0, 2, 3))
    gsum = g.sum(axis=(0, 2, 3))
    num = 2.0 * inter + DICE_EPS
    den = psum + gsum + DICE_EPS
    loss = float(1.0 - (num / den).mean())
    # d(num_c/den_c)/dp_c[pixel] = (2 g - num/den) / den; macro mean -> / c.
    dp = -(2.0 * g - (num / den)[None, :, None, None]) / den[None, :, None, None] / c
    grad = softmax_backward(p, dp, axis=1)
    return loss, grad


def dice_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    return dice_loss_with_grad(logits, labels)[0]


@dataclass
class TotalLoss:
    total: float
    terms: dict[str, float]
    grads: dict[str, np.ndarray] | None = None


def total_loss(outputs, sup: SupervisionBundle, weights: LossWeights,
               want_grads: bool = False) -> TotalLoss:
    """Weighted sum over the live terms of a forward pass.

    ``outputs`` carries target_logits, context_logits (may be None), and
    deep_logits (dict depth -> logits). Gradient keys mirror the term keys:
    "target", "context", "deep_<D>".
    """
    terms: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}

    def add(key, logits, labels, lam):
        ce, dce = cross_entropy_with_grad(logits, labels)
        dc, ddc = dice_loss_with_grad(logits, labels)
        terms[key] = ce + dc
        if want_grads:
            grads[key] = lam * (dce + ddc)

    add("target", outputs.target_logits, sup.y_t, weights.lambda1)
    if outputs.context_logits is not None:
        add("context", outputs.context_logits, sup.y_c, weights.lambda2)
    for d in sorted(outputs.deep_logits):
        if d not in sup.pyramid:
            raise ShapeError(f"supervision bundle is missing the depth-{d} pyramid level")
        add(f"deep_{d}", outputs.deep_logits[d], sup.pyramid[d], weights.lambda3)

    total = weights.lambda1 * terms["target"]
    total += weights.lambda2 * terms.get("context", 0.0)
    total += weights.lambda3 * sum(v for k, v in terms.items() if k.startswith("deep_"))
    return TotalLoss(total=float(total), terms=terms, grads=grads if want_grads else None)
