"""Target/context patch-pair extraction, joint augmentation, and prediction
merging.

A pair holds an S x S target crop at native resolution plus an S x S context
raster downsampled 2x from the 2S x 2S footprint sharing the target's center,
so the context covers twice the linear ground extent at half the resolution.
Context footprints reaching past the scene edge are zero-padded (zone label
NA). Sliding-window offsets run on the stride grid plus a final flush to the
border, so merged predictions always cover every pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .postprocess import ZoneMask
from .synth import Scene


@dataclass
class PatchPair:
    target: np.ndarray    # (S, S) float32
    context: np.ndarray   # (S, S) float32
    y_t: np.ndarray       # (S, S) uint8
    y_c: np.ndarray       # (S, S) uint8
    offset: tuple[int, int]
    target_mpp: float

    @property
    def context_mpp(self) -> float:
        # Half the resolution: twice the meters per pixel.
        return 2.0 * self.target_mpp

    @property
    def size(self) -> int:
        return self.target.shape[0]


def _grid(extent: int, patch: int, stride: int) -> list[int]:
    offsets = list(range(0, extent - patch + 1, stride))
    if offsets[-1] != extent - patch:
        offsets.append(extent - patch)
    return offsets


def _padded_crop(arr: np.ndarray, r0: int, c0: int, size: int, fill) -> np.ndarray:
    h, w = arr.shape
    out = np.full((size, size), fill, dtype=arr.dtype)
    rs, re = max(r0, 0), min(r0 + size, h)
    cs, ce = max(c0, 0), min(c0 + size, w)
    if rs < re and cs < ce:
        out[rs - r0:re - r0, cs - c0:ce - c0] = arr[rs:re, cs:ce]
    return out


def _pool2_mean(arr: np.ndarray) -> np.ndarray:
    h, w = arr.shape
    return arr.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def extract_pairs(scene: Scene, patch: int, stride: int) -> list[PatchPair]:
    """All patch pairs of a scene on the stride grid (plus border flush)."""
    if patch % 16:
        raise ConfigError(f"patch size must be divisible by 16, got {patch}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    h, w = scene.zones.shape
    if patch > h or patch > w:
        raise ConfigError(f"patch {patch} larger than scene {h}x{w}")

    intensity = scene.intensity.astype(np.float32)
    zones = scene.zones
    pairs = []
    half = patch // 2
    for r0 in _grid(h, patch, stride):
        for c0 in _grid(w, patch, stride):
            target = intensity[r0:r0 + patch, c0:c0 + patch].copy()
            y_t = zones[r0:r0 + patch, c0:c0 + patch].copy()
            foot_i = _padded_crop(intensity, r0 - half, c0 - half, 2 * patch, 0.0)
            foot_z = _padded_crop(zones, r0 - half, c0 - half, 2 * patch, 0)
            context = _pool2_mean(foot_i).astype(np.float32)
            y_c = foot_z[::2, ::2].copy()
            pairs.append(PatchPair(target=target, context=context, y_t=y_t, y_c=y_c,
                                   offset=(r0, c0), target_mpp=scene.resolution_m))
    return pairs


def augment(pair: PatchPair, rng: np.random.Generator,
            rot_prob: float = 0.5, hflip_prob: float = 0.5,
            vflip_prob: float = 0.5) -> PatchPair:
    """Apply one jointly sampled rot90/flip composition to all four rasters."""
    k = 0
    if rng.random() < rot_prob:
        k = int(rng.integers(1, 4))
    do_h = rng.random() < hflip_prob
    do_v = rng.random() < vflip_prob

    def tf(arr):
        if k:
            arr = np.rot90(arr, k)
        if do_h:
            arr = arr[:, ::-1]
        if do_v:
            arr = arr[::-1, :]
        return np.ascontiguousarray(arr)

    return PatchPair(target=tf(pair.target), context=tf(pair.context),
                     y_t=tf(pair.y_t), y_c=tf(pair.y_c),
                     offset=pair.offset, target_mpp=pair.target_mpp)


def merge_predictions(items, scene_shape: tuple[int, int],
                      resolution_m: float) -> ZoneMask:
    """Average per-pixel class probabilities over covering patches, then argmax.

    ``items`` yields (offset, probs) with probs shaped (4, S, S). Ties in the
    argmax resolve to the lowest class index.
    """
    h, w = scene_shape
    acc = None
    count = np.zeros((h, w), dtype=np.float64)
    for (r0, c0), probs in items:
        if probs.ndim != 3:
            raise ShapeError(f"patch probabilities must be (C, S, S), got {probs.shape}")
        c, s, s2 = probs.shape
        if s != s2:
            raise ShapeError(f"patch must be square, got {probs.shape}")
        if acc is None:
            acc = np.zeros((c, h, w), dtype=np.float64)
        if r0 < 0 or c0 < 0 or r0 + s > h or c0 + s > w:
            raise ShapeError(f"patch at {(r0, c0)} size {s} falls outside {h}x{w}")
        acc[:, r0:r0 + s, c0:c0 + s] += probs
        count[r0:r0 + s, c0:c0 + s] += 1.0
    if acc is None or (count == 0).any():
        raise ShapeError("merged patches do not cover the scene")
    labels = np.argmax(acc / count[None], axis=0).astype(np.uint8)
    return ZoneMask(labels, resolution_m)


def stack_pairs(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (N,1,S,S) float32 inputs and (N,S,S) int64 labels."""
    t = np.stack([p.target for p in pairs])[:, None].astype(np.float32)
    c = np.stack([p.context for p in pairs])[:, None].astype(np.float32)
    y_t = np.stack([p.y_t for p in pairs]).astype(np.int64)
    y_c = np.stack([p.y_c for p in pairs]).astype(np.int64)
    return t, c, y_t, y_c
