"""Patch pairing geometry, augmentation, and prediction merging."""

import numpy as np
import pytest

from frontseg.errors import ConfigError, ShapeError
from frontseg.patches import augment, extract_pairs, merge_predictions, stack_pairs
from frontseg.postprocess import NA
from frontseg.synth import SynthConfig, generate_scene


def scene96(seed=0, melange=0.0):
    return generate_scene(SynthConfig(seed=seed, size=(96, 96), melange_prob=melange))


def scene(h, w, seed=0):
    return generate_scene(SynthConfig(seed=seed, size=(h, w)))


class TestExtract:
    def test_tiling_arithmetic(self):
        s = scene(576, 576, seed=1)
        pairs = extract_pairs(s, 288, 288)
        assert len(pairs) == 4
        assert sorted(p.offset for p in pairs) == [(0, 0), (0, 288), (288, 0),
                                                   (288, 288)]

    def test_flush_offsets(self):
        s = scene(96, 96)
        pairs = extract_pairs(s, 64, 48)
        assert sorted({p.offset[0] for p in pairs}) == [0, 32]

    def test_patch_larger_than_scene(self):
        with pytest.raises(ConfigError):
            extract_pairs(scene96(), 128, 64)

    def test_corner_context_zero_padded(self):
        s = scene96(seed=2)
        pairs = extract_pairs(s, 64, 64)
        corner = next(p for p in pairs if p.offset == (0, 0))
        border = 64 // 4
        assert np.all(corner.context[:border, :] == 0.0)
        assert np.all(corner.context[:, :border] == 0.0)
        assert np.all(corner.y_c[:border, :] == NA)
        # Interior side is real data.
        assert corner.context[border:, border:].max() > 0

    def test_context_center_matches_pooled_target(self):
        s = scene96(seed=3)
        for p in extract_pairs(s, 64, 32):
            pooled = p.target.reshape(32, 2, 32, 2).mean(axis=(1, 3))
            center = p.context[16:48, 16:48]
            np.testing.assert_allclose(center, pooled, atol=1e-6)

    def test_context_oracle_exact(self):
        s = scene96(seed=4)
        h, w = s.zones.shape
        for p in extract_pairs(s, 64, 64):
            r0, c0 = p.offset
            foot = np.zeros((128, 128), dtype=np.float64)
            for i in range(128):
                for j in range(128):
                    rr, cc = r0 - 32 + i, c0 - 32 + j
                    if 0 <= rr < h and 0 <= cc < w:
                        foot[i, j] = s.intensity[rr, cc]
            oracle = foot.reshape(64, 2, 64, 2).mean(axis=(1, 3))
            np.testing.assert_allclose(p.context, oracle, atol=1e-6)

    def test_resolution_relation(self):
        s = scene96(seed=5)
        p = extract_pairs(s, 64, 64)[0]
        assert p.context_mpp == 2 * p.target_mpp
        # Same raster size, double the linear ground extent.
        assert p.context.shape == p.target.shape


class TestAugment:
    def test_zero_probability_identity(self):
        s = scene96(seed=6)
        p = extract_pairs(s, 64, 64)[0]
        q = augment(p, np.random.default_rng(0), rot_prob=0, hflip_prob=0,
                    vflip_prob=0)
        np.testing.assert_array_equal(q.target, p.target)
        np.testing.assert_array_equal(q.context, p.context)

    def test_forced_hflip_involution(self):
        s = scene96(seed=7)
        p = extract_pairs(s, 64, 64)[0]
        rng = np.random.default_rng(1)
        q = augment(p, rng, rot_prob=0, hflip_prob=1.0, vflip_prob=0)
        r = augment(q, rng, rot_prob=0, hflip_prob=1.0, vflip_prob=0)
        np.testing.assert_array_equal(r.target, p.target)
        np.testing.assert_array_equal(r.y_c, p.y_c)

    def test_label_histogram_invariant(self):
        s = scene96(seed=8)
        p = extract_pairs(s, 64, 32)[3]
        rng = np.random.default_rng(2)
        for _ in range(20):
            q = augment(p, rng)
            np.testing.assert_array_equal(np.bincount(q.y_t.ravel(), minlength=4),
                                          np.bincount(p.y_t.ravel(), minlength=4))

    def test_pairing_geometry_preserved(self):
        # The transformed target must stay the center crop of the transformed
        # context footprint: pooled target == context center, post-transform.
        s = scene96(seed=9)
        p = extract_pairs(s, 64, 64)[0]
        rng = np.random.default_rng(3)
        for _ in range(10):
            q = augment(p, rng)
            pooled = q.target.reshape(32, 2, 32, 2).mean(axis=(1, 3))
            np.testing.assert_allclose(q.context[16:48, 16:48], pooled, atol=1e-6)


class TestMerge:
    def test_single_patch_argmax(self):
        rng = np.random.default_rng(4)
        probs = rng.random((4, 64, 64))
        mask = merge_predictions([((0, 0), probs)], (64, 64), 20.0)
        np.testing.assert_array_equal(mask.labels, probs.argmax(axis=0))

    def test_duplicate_patch_idempotent(self):
        rng = np.random.default_rng(5)
        probs = rng.random((4, 64, 64))
        once = merge_predictions([((0, 0), probs)], (64, 64), 20.0)
        twice = merge_predictions([((0, 0), probs), ((0, 0), probs)], (64, 64), 20.0)
        np.testing.assert_array_equal(once.labels, twice.labels)

    def test_accumulate_divide_argmax_oracle(self):
        rng = np.random.default_rng(6)
        items = []
        for r0 in (0, 16, 32):
            for c0 in (0, 32):
                items.append(((r0, c0), rng.random((4, 64, 64))))
        mask = merge_predictions(items, (96, 96), 20.0)

        acc = np.zeros((4, 96, 96))
        cnt = np.zeros((96, 96))
        for (r0, c0), probs in items:
            acc[:, r0:r0 + 64, c0:c0 + 64] += probs
            cnt[r0:r0 + 64, c0:c0 + 64] += 1
        avg = acc / np.maximum(cnt, 1)
        expected = np.zeros((96, 96), dtype=np.uint8)
        for r in range(96):
            for c in range(96):
                best, best_v = 0, -1.0
                for k in range(4):
                    if avg[k, r, c] > best_v:
                        best, best_v = k, avg[k, r, c]
                expected[r, c] = best
        np.testing.assert_array_equal(mask.labels, expected)

    def test_out_of_bounds_offset(self):
        with pytest.raises(ShapeError):
            merge_predictions([((40, 0), np.zeros((4, 64, 64)))], (96, 96), 20.0)

    def test_uncovered_scene_rejected(self):
        with pytest.raises(ShapeError):
            merge_predictions([((0, 0), np.zeros((4, 64, 64)))], (96, 96), 20.0)

    def test_onehot_label_round_trip(self):
        s = scene96(seed=10)
        pairs = extract_pairs(s, 64, 32)
        items = []
        for p in pairs:
            onehot = np.zeros((4, 64, 64))
            np.put_along_axis(onehot, p.y_t[None].astype(np.int64), 1.0, axis=0)
            items.append((p.offset, onehot))
        mask = merge_predictions(items, s.zones.shape, s.resolution_m)
        np.testing.assert_array_equal(mask.labels, s.zones)


class TestStack:
    def test_shapes_and_dtypes(self):
        s = scene96(seed=11)
        pairs = extract_pairs(s, 64, 32)
        t, c, y_t, y_c = stack_pairs(pairs)
        assert t.shape == (len(pairs), 1, 64, 64) and t.dtype == np.float32
        assert c.shape == t.shape
        assert y_t.shape == (len(pairs), 64, 64) and y_t.dtype == np.int64
        assert y_c.shape == y_t.shape
