"""Two-branch encoder-decoder segmentation network with hooking junctions.

Both branches are classic U-Nets (four pool/upsample stages around a
bottleneck, channel schedule base*(1,2,4,8,10), skip concatenation). The
context branch runs first; at configured decoder depths the target branch
hooks the context decoder feature in (center-crop, concat, optional
self-attention) before its own upsampling. Deep-supervision heads are 1x1
convolutions tapping the post-upsample target features.

Ablation variants differ only in which junctions exist:

  baseline_unet              single branch, no hooks
  hooknet                    one plain hook at depth 1
  hooknet_attention          one attended hook at depth 1
  hooknet_deepsup            one plain hook, deep head at depth 1
  hooknet_multihook_deepsup  plain hooks + deep heads at depths 1..3
  amd_hooknet                attended hooks + deep heads at depths 1..3
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import DEFAULT_TOKEN_CAP, AttentionHook
from .errors import ConfigError, ParseError, ShapeError
from .layers import Conv2d, ConvBlock, ConvTranspose2x2, Layer, MaxPool2

CHECKPOINT_MAGIC = b"FRONTSEG"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class VariantSpec:
    hooks: tuple[int, ...]
    attention: bool
    deep: tuple[int, ...]
    two_branch: bool = True


VARIANTS: dict[str, VariantSpec] = {
    "baseline_unet": VariantSpec((), False, (), two_branch=False),
    "hooknet": VariantSpec((1,), False, ()),
    "hooknet_attention": VariantSpec((1,), True, ()),
    "hooknet_deepsup": VariantSpec((1,), False, (1,)),
    "hooknet_multihook_deepsup": VariantSpec((1, 2, 3), False, (1, 2, 3)),
    "amd_hooknet": VariantSpec((1, 2, 3), True, (1, 2, 3)),
}

ABLATION_LADDER = ["hooknet", "hooknet_attention", "hooknet_deepsup",
                   "hooknet_multihook_deepsup", "amd_hooknet"]


@dataclass
class ModelConfig:
    variant: str = "amd_hooknet"
    base_channels: int = 32
    class_count: int = 4
    token_cap: int | None = DEFAULT_TOKEN_CAP

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'; "
                              f"known: {sorted(VARIANTS)}")
        if self.base_channels < 1 or self.class_count < 2:
            raise ConfigError("base_channels must be >= 1 and class_count >= 2")

    @property
    def spec(self) -> VariantSpec:
        return VARIANTS[self.variant]

    def to_kv(self) -> str:
        cap = "none" if self.token_cap is None else str(self.token_cap)
        return (f"variant={self.variant}\nbase_channels={self.base_channels}\n"
                f"class_count={self.class_count}\ntoken_cap={cap}\n")

    @classmethod
    def from_kv(cls, text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line and "=" in line:
                k, v = line.split("=", 1)
                kv[k.strip()] = v.strip()
        try:
            cap = kv.get("token_cap", "none")
            return cls(variant=kv["variant"],
                       base_channels=int(kv["base_channels"]),
                       class_count=int(kv["class_count"]),
                       token_cap=None if cap == "none" else int(cap))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad model config block: {exc}") from exc


@dataclass
class ForwardOutputs:
    target_logits: np.ndarray
    context_logits: np.ndarray | None
    deep_logits: dict[int, np.ndarray] = field(default_factory=dict)
    shape_trace: list[tuple[str, tuple[int, int, int]]] | None = None
    attention_maps: dict[int, np.ndarray] | None = None


class UNetBranch(Layer):
    """One encoder-decoder branch. ``hook_extra`` widens the upconv input at
    hooked depths by the concatenated context channels."""

    def __init__(self, base: int, class_count: int, hook_extra: dict[int, int],
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.base = base
        enc_in = [1, base, 2 * base, 4 * base]
        enc_out = [base, 2 * base, 4 * base, 8 * base]
        self.enc_blocks = [ConvBlock(i, o, rng, dtype) for i, o in zip(enc_in, enc_out)]
        self.pools = [MaxPool2() for _ in range(4)]
        self.bottleneck = ConvBlock(8 * base, 10 * base, rng, dtype)
        self.dec_ch = [8 * base, 4 * base, 2 * base, base]
        prev = [10 * base] + self.dec_ch[:3]
        self.upconvs = [ConvTranspose2x2(prev[d] + hook_extra.get(d + 1, 0),
                                         self.dec_ch[d], rng, dtype)
                        for d in range(4)]
        self.dec_blocks = [ConvBlock(2 * self.dec_ch[d], self.dec_ch[d], rng, dtype)
                           for d in range(4)]
        self.final = Conv2d(base, class_count, 3, rng, dtype)

    def children(self):
        out = []
        for i in range(4):
            out.append((f"enc{i + 1}", self.enc_blocks[i]))
            out.append((f"pool{i + 1}", self.pools[i]))
        out.append(("bottleneck", self.bottleneck))
        for d in range(4):
            out.append((f"up{d + 1}", self.upconvs[d]))
            out.append((f"dec{d + 1}", self.dec_blocks[d]))
        out.append(("final", self.final))
        return out

    # -- forward ---------------------------------------------------------

    def encode(self, x, trace=None, label=""):
        if trace is not None:
            trace.append((f"{label}input", (x.shape[2], x.shape[3], x.shape[1])))
        skips = []
        for i in range(4):
            x = self.enc_blocks[i].forward(x)
            if trace is not None:
                trace.append((f"{label}enc{i + 1}", (x.shape[2], x.shape[3], x.shape[1])))
            skips.append(x)
            x = self.pools[i].forward(x)
        x = self.bottleneck.forward(x)
        if trace is not None:
            trace.append((f"{label}bottleneck", (x.shape[2], x.shape[3], x.shape[1])))
        return skips, x

    def decode_plain(self, bottom, skips, trace=None, label=""):
        """Hook-free decoder; returns (logits, per-stage features)."""
        x = bottom
        feats = []
        for d in range(4):
            x = self.upconvs[d].forward(x)
            x = np.concatenate([x, skips[3 - d]], axis=1)
            x = self.dec_blocks[d].forward(x)
            if trace is not None:
                trace.append((f"{label}dec{d + 1}", (x.shape[2], x.shape[3], x.shape[1])))
            feats.append(x)
        logits = self.final.forward(x)
        if trace is not None:
            trace.append((f"{label}logits", (logits.shape[2], logits.shape[3],
                                             logits.shape[1])))
        return logits, feats

    # -- backward ---------------------------------------------------------

    def encode_backward(self, g, skip_grads):
        g = self.bottleneck.backward(g)
        for i in reversed(range(4)):
            g = self.pools[i].backward(g)
            if skip_grads[i] is not None:
                g = g + skip_grads[i]
            g = self.enc_blocks[i].backward(g)
        return g

    def decode_plain_backward(self, d_logits, feat_grads=None):
        """Backward of decode_plain. ``feat_grads`` carries extra gradients
        flowing into the per-stage features (hooking consumers). Returns
        (grad wrt bottom, per-skip grads)."""
        skip_grads: list[np.ndarray | None] = [None] * 4
        g = self.final.backward(d_logits) if d_logits is not None else None
        for d in reversed(range(4)):
            extra = feat_grads.get(d) if feat_grads else None
            if g is None and extra is None:
                raise ShapeError("decoder backward received no gradient at stage "
                                 f"{d + 1}")
            if g is None:
                g = extra
            elif extra is not None:
                g = g + extra
            g = self.dec_blocks[d].backward(g)
            split = self.dec_ch[d]
            skip_grads[3 - d] = np.ascontiguousarray(g[:, split:])
            g = self.upconvs[d].backward(np.ascontiguousarray(g[:, :split]))
        return g, skip_grads


class TwoBranchNet(Layer):
    """Full model: context branch, target branch, hooks and deep heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        spec = cfg.spec
        rng = np.random.default_rng(seed)
        b = cfg.base_channels
        ctx_ch = {1: 8 * b, 2: 4 * b, 3: 2 * b}  # context decoder stage widths
        tgt_prev = {1: 10 * b, 2: 8 * b, 3: 4 * b}  # incoming target widths

        self.context = (UNetBranch(b, cfg.class_count, {}, rng, dtype)
                        if spec.two_branch else None)
        hook_extra = {d: ctx_ch[d] for d in spec.hooks}
        self.target = UNetBranch(b, cfg.class_count, hook_extra, rng, dtype)
        self.hooks = {d: AttentionHook(tgt_prev[d], ctx_ch[d], spec.attention, rng,
                                       token_cap=cfg.token_cap, dtype=dtype)
                      for d in spec.hooks}
        self.heads = {d: Conv2d(self.target.dec_ch[d - 1], cfg.class_count, 1,
                                rng, dtype)
                      for d in spec.deep}
        self._ctx_logits_shape = None

    def children(self):
        out = []
        if self.context is not None:
            out.append(("context", self.context))
        out.append(("target", self.target))
        for d in sorted(self.hooks):
            out.append((f"hook{d}", self.hooks[d]))
        for d in sorted(self.heads):
            out.append((f"head{d}", self.heads[d]))
        return out

    # -- forward ---------------------------------------------------------

    def forward(self, target_patch: np.ndarray, context_patch: np.ndarray | None,
                record_shapes: bool = False,
                keep_attention: bool = False) -> ForwardOutputs:
        t = np.asarray(target_patch, dtype=self.dtype)
        if t.ndim != 4 or t.shape[1] != 1:
            raise ShapeError(f"target patch must be (N, 1, S, S), got {t.shape}")
        s = t.shape[2]
        if s % 16 or t.shape[3] != s:
            raise ShapeError(f"patch side must be square and divisible by 16, got "
                             f"{t.shape[2]}x{t.shape[3]}")
        trace = [] if record_shapes else None

        ctx_logits = None
        ctx_feats = None
        if self.context is not None:
            if context_patch is None:
                raise ConfigError("two-branch variant needs a context patch")
            c = np.asarray(context_patch, dtype=self.dtype)
            if c.shape != t.shape:
                raise ShapeError(f"context patch {c.shape} must match target {t.shape}")
            c_skips, c_bottom = self.context.encode(c, trace, "context.")
            ctx_logits, ctx_feats = self.context.decode_plain(c_bottom, c_skips,
                                                              trace, "context.")

        t_skips, x = self.target.encode(t, trace, "target.")
        deep_logits: dict[int, np.ndarray] = {}
        attn_maps: dict[int, np.ndarray] = {}
        for d in range(4):
            depth = d + 1
            if depth in self.hooks:
                x = self.hooks[depth].forward(x, ctx_feats[d],
                                              keep_weights=keep_attention)
                if keep_attention and self.hooks[depth].attn is not None:
                    attn_maps[depth] = self.hooks[depth].attn.last_weights
            x = self.target.upconvs[d].forward(x)
            if depth in self.heads:
                deep_logits[depth] = self.heads[depth].forward(x)
            x = np.concatenate([x, t_skips[3 - d]], axis=1)
            x = self.target.dec_blocks[d].forward(x)
            if trace is not None:
                trace.append((f"target.dec{depth}", (x.shape[2], x.shape[3],
                                                     x.shape[1])))
        t_logits = self.target.final.forward(x)
        if trace is not None:
            trace.append(("target.logits", (t_logits.shape[2], t_logits.shape[3],
                                            t_logits.shape[1])))
        assert t_logits.dtype == self.dtype, \
            f"activation dtype drifted to {t_logits.dtype}"
        self._ctx_logits_shape = None if ctx_logits is None else ctx_logits.shape
        return ForwardOutputs(target_logits=t_logits, context_logits=ctx_logits,
                              deep_logits=deep_logits, shape_trace=trace,
                              attention_maps=attn_maps if keep_attention else None)

    # -- backward ---------------------------------------------------------

    def backward(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients from loss gradients keyed like the
        loss terms: "target", "context", "deep_<D>". Forward must have run in
        training mode. Returns the input-patch gradients."""
        d_t = grads["target"]
        ctx_feat_grads: dict[int, np.ndarray] = {}

        g = self.target.final.backward(d_t)
        skip_grads: list[np.ndarray | None] = [None] * 4
        for d in reversed(range(4)):
            depth = d + 1
            g = self.target.dec_blocks[d].backward(g)
            split = self.target.dec_ch[d]
            skip_grads[3 - d] = np.ascontiguousarray(g[:, split:])
            g_up = np.ascontiguousarray(g[:, :split])
            if depth in self.heads and f"deep_{depth}" in grads:
                g_up = g_up + self.heads[depth].backward(grads[f"deep_{depth}"])
            g = self.target.upconvs[d].backward(g_up)
            if depth in self.hooks:
                g, g_ctx = self.hooks[depth].backward(g)
                ctx_feat_grads[d] = g_ctx
        d_target_in = self.target.encode_backward(g, skip_grads)

        d_context_in = None
        if self.context is not None:
            d_c = grads.get("context")
            if d_c is None:
                d_c = np.zeros(self._ctx_logits_shape, dtype=self.dtype)
            g, c_skip_grads = self.context.decode_plain_backward(d_c, ctx_feat_grads)
            d_context_in = self.context.encode_backward(g, c_skip_grads)
        return {"target_patch": d_target_in, "context_patch": d_context_in}

    # -- state ------------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.params().items()}
        out.update(self.buffers())
        return out


def parameter_count(cfg: ModelConfig) -> int:
    model = TwoBranchNet(cfg, seed=0)
    return sum(p.size for p in model.params().values())


# -- checkpoint io ---------------------------------------------------------

_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_DTYPES = {1: np.dtype("float32"), 2: np.dtype("float64")}


def save_checkpoint(model: TwoBranchNet, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_bytes = model.cfg.to_kv().encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    tensors = model.state_tensors()
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        code = _DTYPE_CODES[np.dtype(arr.dtype)]
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> TwoBranchNet:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)

    def need(n, what):
        chunk = buf.read(n)
        if len(chunk) != n:
            raise ParseError(f"checkpoint {path}: truncated while reading {what}")
        return chunk

    if need(8, "magic") != CHECKPOINT_MAGIC:
        raise ParseError(f"checkpoint {path}: bad magic string")
    version = struct.unpack("<I", need(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"checkpoint {path}: unsupported version {version}")
    cfg_len = struct.unpack("<I", need(4, "config length"))[0]
    cfg = ModelConfig.from_kv(need(cfg_len, "config").decode())
    count = struct.unpack("<I", need(4, "tensor count"))[0]

    loaded: dict[str, np.ndarray] = {}
    dtype = np.float32
    for _ in range(count):
        name_len = struct.unpack("<H", need(2, "tensor name length"))[0]
        name = need(name_len, "tensor name").decode()
        code, ndim = struct.unpack("<BB", need(2, "tensor header"))
        if code not in _CODE_DTYPES:
            raise ParseError(f"checkpoint {path}: unknown dtype code {code}")
        shape = struct.unpack(f"<{ndim}I", need(4 * ndim, "tensor shape"))
        dt = _CODE_DTYPES[code]
        dtype = dt
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(need(nbytes, f"tensor {name}"), dtype=dt).reshape(shape)
        loaded[name] = arr

    model = TwoBranchNet(cfg, seed=0, dtype=dtype)
    tensors = model.state_tensors()
    if set(tensors) != set(loaded):
        missing = set(tensors) ^ set(loaded)
        raise ParseError(f"checkpoint {path}: tensor names mismatch ({sorted(missing)[:4]}...)")
    for name, arr in loaded.items():
        if tensors[name].shape != arr.shape:
            raise ParseError(f"checkpoint {path}: tensor {name} has shape {arr.shape}, "
                             f"model expects {tensors[name].shape}")
        tensors[name][...] = arr
    return model
