"""Center-crop alignment and scaled dot-product self-attention over hooked
feature maps.

The hook joins the two branches at a decoder depth: the context feature
(twice the spatial size of the target feature, same ground footprint) is
center-cropped to the target size, concatenated on the channel axis, and
optionally passed through single-head self-attention whose tokens are the
spatial positions and whose embedding is the channel vector. The attended
output is projected back to the concatenated channel count and added
residually, so zeroed output-projection weights make the attention an exact
identity.

Above a configurable token budget the map is average-pooled before attention
and the attended output is bilinearly restored before the residual add; this
bounds the T x T score matrix at full-patch scale.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .layers import Layer, Param, he_uniform, softmax, softmax_backward

DEFAULT_TOKEN_CAP = 2304  # 48 x 48 positions


def center_crop_half(x: np.ndarray) -> np.ndarray:
    """Central (H/2)x(W/2) window of an (N, C, H, W) map; offsets floor(H/4),
    floor(W/4)."""
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise ShapeError(f"center_crop_half needs even H and W, got {h}x{w}")
    r0, c0 = h // 4, w // 4
    return x[:, :, r0:r0 + h // 2, c0:c0 + w // 2]


def uncrop_half(dy: np.ndarray, full_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of center_crop_half: zero-embed a gradient back into the full map."""
    h, w = full_hw
    out = np.zeros(dy.shape[:2] + (h, w), dtype=dy.dtype)
    r0, c0 = h // 4, w // 4
    out[:, :, r0:r0 + h // 2, c0:c0 + w // 2] = dy
    return out


class _AvgPool(Layer):
    """f x f mean pooling used only to shrink the attention token grid."""

    def __init__(self, factor: int):
        super().__init__()
        self.f = factor

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        f = self.f
        return x.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        f = self.f
        up = np.repeat(np.repeat(dy, f, axis=2), f, axis=3)
        return up / (f * f)


def _bilinear_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-centered bilinear resizing."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        i0 = int(math.floor(src))
        frac = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[o, lo] += 1.0 - frac
        m[o, hi] += frac
    return m


class _BilinearResize(Layer):
    def __init__(self, in_hw: tuple[int, int], out_hw: tuple[int, int], dtype):
        super().__init__()
        self.wr = _bilinear_matrix(out_hw[0], in_hw[0], dtype)
        self.wc = _bilinear_matrix(out_hw[1], in_hw[1], dtype)

    def _apply(self, x, wr, wc):
        t = np.tensordot(x, wr, axes=([2], [1]))   # (N,C,W,Ho)
        t = np.tensordot(t, wc, axes=([2], [1]))   # (N,C,Ho,Wo)
        return np.ascontiguousarray(t)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self._apply(x, self.wr, self.wc)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self._apply(dy, self.wr.T, self.wc.T)


class SelfAttention2d(Layer):
    """Single-head scaled dot-product self-attention with a residual output.

    Q, K, V are 1x1 projections of the input map; attention weights are
    SoftMax(Q K^T / sqrt(d_k)) over spatial tokens; the attended values are
    projected back to the input channel count and added to the input. The
    output projection starts at zero, so a freshly built module is an exact
    identity and training eases in smoothly.
    """

    def __init__(self, channels: int, rng: np.random.Generator,
                 d_k: int | None = None, token_cap: int | None = DEFAULT_TOKEN_CAP,
                 dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.d_k = d_k if d_k is not None else max(1, math.ceil(channels / 8))
        self.token_cap = token_cap
        self.dtype = dtype
        self.w_q = Param(he_uniform(rng, (self.d_k, channels), channels, dtype))
        self.w_k = Param(he_uniform(rng, (self.d_k, channels), channels, dtype))
        self.w_v = Param(he_uniform(rng, (self.d_k, channels), channels, dtype))
        self.w_out = Param(np.zeros((channels, self.d_k), dtype=dtype))
        self._cache = None
        self.last_weights: np.ndarray | None = None

    def params(self):
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_out": self.w_out}

    def _pool_factor(self, h: int, w: int) -> int:
        if self.token_cap is None or h * w <= self.token_cap:
            return 1
        f = 2
        while (h // f) * (w // f) > self.token_cap:
            f *= 2
        if h % f or w % f:
            raise ShapeError(f"token cap {self.token_cap} needs {f}-divisible sides, "
                             f"got {h}x{w}")
        return f

    def forward(self, m: np.ndarray, keep_weights: bool = False) -> np.ndarray:
        if not np.all(np.isfinite(m)):
            raise FloatingPointError("self_attention input contains non-finite values")
        n, c, h, w = m.shape
        if c != self.channels:
            raise ShapeError(f"attention built for {self.channels} channels, got {c}")
        f = self._pool_factor(h, w)
        pool = _AvgPool(f) if f > 1 else None
        mp = pool.forward(m) if pool else m
        hp, wp = mp.shape[2], mp.shape[3]
        t = hp * wp
        x = mp.reshape(n, c, t)

        q = np.einsum("dc,nct->ndt", self.w_q.data, x)
        k = np.einsum("dc,nct->ndt", self.w_k.data, x)
        v = np.einsum("dc,nct->ndt", self.w_v.data, x)
        # Plain-float scale keeps the array dtype (a numpy scalar would promote
        # float32 activations to float64).
        scores = np.einsum("ndt,nds->nts", q, k) / float(math.sqrt(self.d_k))
        attn = softmax(scores, axis=2)
        o = np.einsum("nts,nds->ndt", attn, v)
        y = np.einsum("cd,ndt->nct", self.w_out.data, o).reshape(n, c, hp, wp)

        resize = None
        if f > 1:
            resize = _BilinearResize((hp, wp), (h, w), m.dtype)
            y = resize.forward(y)
        if keep_weights:
            self.last_weights = attn
        if self.training:
            self._cache = (x, q, k, v, attn, o, pool, resize, (n, c, hp, wp))
        return m + y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._cache is not None, "forward() with training=True must precede backward()"
        x, q, k, v, attn, o, pool, resize, (n, c, hp, wp) = self._cache
        dyp = resize.backward(dy) if resize else dy
        dy3 = dyp.reshape(n, c, hp * wp)

        self.w_out.grad += np.einsum("nct,ndt->cd", dy3, o)
        do = np.einsum("cd,nct->ndt", self.w_out.data, dy3)
        dattn = np.einsum("ndt,nds->nts", do, v)
        dv = np.einsum("nts,ndt->nds", attn, do)
        dscores = softmax_backward(attn, dattn, axis=2) / float(math.sqrt(self.d_k))
        dq = np.einsum("nts,nds->ndt", dscores, k)
        dk = np.einsum("nts,ndt->nds", dscores, q)

        self.w_q.grad += np.einsum("ndt,nct->dc", dq, x)
        self.w_k.grad += np.einsum("nds,ncs->dc", dk, x)
        self.w_v.grad += np.einsum("ndt,nct->dc", dv, x)
        dx = (np.einsum("dc,ndt->nct", self.w_q.data, dq)
              + np.einsum("dc,nds->ncs", self.w_k.data, dk)
              + np.einsum("dc,ndt->nct", self.w_v.data, dv)).reshape(n, c, hp, wp)
        if pool:
            dx = pool.backward(dx)
        return dy + dx


class AttentionHook(Layer):
    """Crop-concat-attend junction between the context and target branches.

    ``forward`` takes the incoming target feature (S x S) and the context
    decoder feature (2S x 2S), center-crops the context, concatenates on
    channels, and applies self-attention when enabled. ``backward`` returns
    the gradient pair (d_target, d_context) with the context part zero-padded
    back to the uncropped size.
    """

    def __init__(self, target_ch: int, context_ch: int, attention: bool,
                 rng: np.random.Generator, token_cap: int | None = DEFAULT_TOKEN_CAP,
                 dtype=np.float32):
        super().__init__()
        self.target_ch = target_ch
        self.context_ch = context_ch
        self.out_ch = target_ch + context_ch
        self.attn = (SelfAttention2d(self.out_ch, rng, token_cap=token_cap, dtype=dtype)
                     if attention else None)
        self._ctx_hw = None

    def children(self):
        return [("attn", self.attn)] if self.attn else []

    def forward(self, target_feat: np.ndarray, context_feat: np.ndarray,
                keep_weights: bool = False) -> np.ndarray:
        th, tw = target_feat.shape[2], target_feat.shape[3]
        ch, cw = context_feat.shape[2], context_feat.shape[3]
        if (ch, cw) != (2 * th, 2 * tw):
            raise ShapeError(f"context feature must be twice the target size: "
                             f"target {th}x{tw}, context {ch}x{cw}")
        if context_feat.shape[1] != self.context_ch or target_feat.shape[1] != self.target_ch:
            raise ShapeError("hook channel counts do not match the built junction")
        cropped = center_crop_half(context_feat)
        if cropped.shape[2:] != target_feat.shape[2:]:
            raise ShapeError("cropped context misaligned with target feature")
        self._ctx_hw = (ch, cw)
        m = np.concatenate([target_feat, cropped], axis=1)
        if self.attn is not None:
            m = self.attn.forward(m, keep_weights=keep_weights)
        return m

    def backward(self, dy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.attn is not None:
            dy = self.attn.backward(dy)
        d_target = dy[:, :self.target_ch]
        d_cropped = dy[:, self.target_ch:]
        d_context = uncrop_half(d_cropped, self._ctx_hw)
        return np.ascontiguousarray(d_target), d_context
