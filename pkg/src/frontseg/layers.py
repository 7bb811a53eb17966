"""Differentiable numpy building blocks for the two-branch segmentation nets.

Every layer carries an explicit ``forward``/``backward`` pair operating on
(N, C, H, W) arrays. Parameters live in :class:`Param` objects whose gradient
buffer always matches the parameter shape. Layers cache whatever the backward
pass needs only while ``training`` is True, so pure inference stays lean.

All convolutions are stride 1 with "same" padding (kernel 3, pad 1, or kernel
1, pad 0); upsampling is a 2x2 stride-2 transposed convolution; pooling is a
2x2 max. That is the complete operator set the layer table of the model needs.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32


class Param:
    """A trainable tensor plus its gradient buffer (same shape, same dtype)."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = np.ascontiguousarray(data)
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size


class Layer:
    """Base class: parameter/buffer registry and train/eval switching."""

    def __init__(self):
        self.training = True

    def children(self) -> list[tuple[str, "Layer"]]:
        return []

    def params(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for name, child in self.children():
            for k, p in child.params().items():
                out[f"{name}.{k}"] = p
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that still belongs in checkpoints (BN stats)."""
        out: dict[str, np.ndarray] = {}
        for name, child in self.children():
            for k, b in child.buffers().items():
                out[f"{name}.{k}"] = b
        return out

    def set_training(self, mode: bool) -> None:
        self.training = mode
        for _, child in self.children():
            child.set_training(mode)

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.grad[...] = 0.0


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _im2col(x_pad: np.ndarray, k: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N*H*W, C*k*k) rows ordered batch-major, then spatial."""
    n, c, hp, wp = x_pad.shape
    h, w = hp - k + 1, wp - k + 1
    win = np.lib.stride_tricks.sliding_window_view(x_pad, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
    return np.ascontiguousarray(cols)


def _conv_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None):
    """Stride-1 same-padding correlation. Returns (y, cols) with cols reusable
    for the weight gradient."""
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c != c_in:
        raise ShapeError(f"conv expects {c_in} input channels, got {c}")
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(x, k)
    y = cols @ weight.reshape(c_out, -1).T
    if bias is not None:
        y += bias
    return y.reshape(n, h, w, c_out).transpose(0, 3, 1, 2), cols


class Conv2d(Layer):
    """kxk correlation, stride 1, pad k//2 (k in {1, 3}), with bias."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        assert ksize in (1, 3), "only 1x1 and 3x3 kernels are used"
        self.in_ch, self.out_ch, self.ksize = in_ch, out_ch, ksize
        fan_in = in_ch * ksize * ksize
        self.weight = Param(he_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype))
        self.bias = Param(np.zeros(out_ch, dtype=dtype))
        self._cols = None
        self._in_shape = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, cols = _conv_forward(x, self.weight.data, self.bias.data)
        if self.training:
            self._cols = cols
            self._in_shape = x.shape
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._cols is not None, "forward() with training=True must precede backward()"
        c_out = self.out_ch
        dy_cols = np.ascontiguousarray(dy.transpose(0, 2, 3, 1).reshape(-1, c_out))
        self.weight.grad += (dy_cols.T @ self._cols).reshape(self.weight.shape)
        self.bias.grad += dy_cols.sum(axis=0)
        # Input gradient is another same-padding correlation with the kernel
        # spatially flipped and channel axes swapped.
        w_t = self.weight.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
        dx, _ = _conv_forward(dy, np.ascontiguousarray(w_t), None)
        return dx


class ConvTranspose2x2(Layer):
    """2x2 stride-2 transposed convolution: doubles H and W, with bias.

    Output windows do not overlap, so each output pixel is a single linear
    map of one input pixel.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.weight = Param(he_uniform(rng, (in_ch, out_ch, 2, 2), in_ch * 4, dtype))
        self.bias = Param(np.zeros(out_ch, dtype=dtype))
        self._x = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.in_ch:
            raise ShapeError(f"upconv expects {self.in_ch} input channels, got {c}")
        if self.training:
            self._x = x
        t = np.tensordot(x, self.weight.data, axes=([1], [0]))  # (N,H,W,O,2,2)
        y = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, self.out_ch, 2 * h, 2 * w)
        y += self.bias.data[None, :, None, None]
        return np.ascontiguousarray(y)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._x is not None, "forward() with training=True must precede backward()"
        n, o, h2, w2 = dy.shape
        h, w = h2 // 2, w2 // 2
        dyw = dy.reshape(n, o, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)  # (N,H,W,O,2,2)
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        self.weight.grad += np.tensordot(self._x, dyw, axes=([0, 2, 3], [0, 1, 2]))
        dx = np.tensordot(dyw, self.weight.data, axes=([3, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(dx.transpose(0, 3, 1, 2))


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Backward routes the gradient to the argmax
    cell of each window (first cell wins on ties, row-major window order)."""

    def __init__(self):
        super().__init__()
        self._idx = None
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        if self.training:
            self._idx = idx
            self._in_shape = x.shape
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._idx is not None, "forward() with training=True must precede backward()"
        n, c, h, w = self._in_shape
        dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(dwin, self._idx[..., None], dy[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return np.ascontiguousarray(dx.reshape(n, c, h, w))


class BatchNorm2d(Layer):
    """Per-channel batch normalization with running statistics.

    Training mode normalizes by the batch statistics (biased variance) and
    updates running stats (unbiased variance); eval mode uses running stats.
    """

    def __init__(self, ch: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.ch = ch
        self.eps = eps
        self.momentum = momentum
        self.gamma = Param(np.ones(ch, dtype=dtype))
        self.beta = Param(np.zeros(ch, dtype=dtype))
        self.running_mean = np.zeros(ch, dtype=dtype)
        self.running_var = np.ones(ch, dtype=dtype)
        self._cache = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if c != self.ch:
            raise ShapeError(f"batchnorm expects {self.ch} channels, got {c}")
        if self.training:
            count = n * h * w
            if count < 2:
                raise ShapeError("batchnorm in training mode needs batch*H*W >= 2")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var * count / (count - 1)
            self._cache = (xhat, inv)
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean[None, :, None, None]) * inv[None, :, None, None]
            self._cache = (xhat, inv)
        return self.gamma.data[None, :, None, None] * xhat + self.beta.data[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._cache is not None, "forward() must precede backward()"
        xhat, inv = self._cache
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.data[None, :, None, None]
        if not self.training:
            return dxhat * inv[None, :, None, None]
        n, _, h, w = dy.shape
        count = n * h * w
        s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        return (inv[None, :, None, None] / count) * (count * dxhat - s1 - xhat * s2)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.training:
            self._mask = x > 0
            return np.where(self._mask, x, 0)
        return np.maximum(x, 0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        assert self._mask is not None, "forward() with training=True must precede backward()"
        return np.where(self._mask, dy, 0)


class ConvBlock(Layer):
    """Two groups of conv3x3 -> batchnorm -> ReLU, the basic stage unit."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)
        self.relu2 = ReLU()

    def children(self):
        return [("conv1", self.conv1), ("bn1", self.bn1), ("relu1", self.relu1),
                ("conv2", self.conv2), ("bn2", self.bn2), ("relu2", self.relu2)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for _, layer in self.children():
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self.children()):
            dy = layer.backward(dy)
        return dy


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, axis: int) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=axis, keepdims=True)
    return probs * (dprobs - inner)


def grad_check(op, x: np.ndarray, epsilon: float = 1e-5,
               rng: np.random.Generator | None = None,
               coord_limit: int | None = None) -> float:
    """Central-finite-difference check of ``op.backward`` against ``op.forward``.

    ``op`` exposes forward(x) -> y, backward(dy) -> dx and params() -> dict.
    The scalar probe is sum(y * R) for a fixed random R, so the analytic
    gradients are backward(R) plus the accumulated parameter grads. Returns
    the max over all checked coordinates (inputs and parameters) of

        |analytic - numeric| / max(1, |numeric|)

    ``coord_limit`` caps the number of coordinates probed per tensor (random
    subsample); by default every coordinate is checked. Use float64 data.
    """
    if not (1e-6 <= epsilon <= 1e-2):
        raise ValueError(f"epsilon {epsilon} outside supported range [1e-6, 1e-2]")
    if not np.all(np.isfinite(x)):
        raise ValueError("grad_check input must be finite")
    rng = rng or np.random.default_rng(0)

    y0 = op.forward(x)
    if not np.array_equal(y0, op.forward(x)):
        raise ValueError("op is non-deterministic; grad_check unsupported")
    r = rng.standard_normal(y0.shape)

    params = op.params()
    for p in params.values():
        p.grad[...] = 0.0
    dx = op.backward(r)
    analytic = {"__input__": dx}
    analytic.update({k: p.grad.copy() for k, p in params.items()})

    def loss_at() -> float:
        return float(np.sum(op.forward(x) * r))

    tensors = {"__input__": x}
    tensors.update({k: p.data for k, p in params.items()})

    worst = 0.0
    for name, tensor in tensors.items():
        flat = tensor.reshape(-1)
        idxs = np.arange(flat.size)
        if coord_limit is not None and flat.size > coord_limit:
            idxs = rng.choice(flat.size, size=coord_limit, replace=False)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_at()
            flat[i] = orig - epsilon
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2 * epsilon)
            err = abs(a_flat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
