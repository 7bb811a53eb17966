"""Geometry oracles for component labeling, ocean retention, front extraction."""

import numpy as np
import pytest

from frontseg.errors import ConfigError
from frontseg.postprocess import (
    GLACIER,
    OCEAN,
    ROCK,
    FrontSet,
    ZoneMask,
    connected_components,
    crop_zone_mask,
    delineate,
    extract_front,
    read_front,
    retain_ocean,
    write_front,
)


def flood_fill_oracle(mask, connectivity=4):
    """Recursive flood fill; returns the set-of-frozensets partition."""
    import sys
    sys.setrecursionlimit(100000)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros((h, w), dtype=bool)
    offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        offsets += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    comps = []

    def fill(r, c, acc):
        seen[r, c] = True
        acc.add((r, c))
        for dr, dc in offsets:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                fill(nr, nc, acc)

    for r in range(h):
        for c in range(w):
            if mask[r, c] and not seen[r, c]:
                acc = set()
                fill(r, c, acc)
                comps.append(frozenset(acc))
    return set(comps)


def partition_of(labels):
    out = []
    for lab in range(1, labels.max() + 1):
        out.append(frozenset((int(r), int(c)) for r, c in np.argwhere(labels == lab)))
    return set(out)


class TestConnectedComponents:
    def test_all_false(self):
        labels, sizes = connected_components(np.zeros((4, 4), dtype=bool))
        assert labels.max() == 0
        assert len(sizes) == 0

    def test_checkerboard_isolates_under_4(self):
        board = np.indices((6, 6)).sum(axis=0) % 2 == 0
        labels, sizes = connected_components(board, connectivity=4)
        assert len(sizes) == board.sum()
        assert np.all(sizes == 1)

    def test_checkerboard_joins_under_8(self):
        board = np.indices((6, 6)).sum(axis=0) % 2 == 0
        _, sizes = connected_components(board, connectivity=8)
        assert len(sizes) == 1

    def test_bad_connectivity(self):
        with pytest.raises(ConfigError):
            connected_components(np.zeros((2, 2), dtype=bool), connectivity=6)

    def test_random_rasters_match_flood_fill(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            mask = rng.random((16, 16)) < 0.45
            labels, sizes = connected_components(mask)
            assert partition_of(labels) == flood_fill_oracle(mask)
            for lab, size in enumerate(sizes, start=1):
                assert (labels == lab).sum() == size

    def test_scan_order_labeling(self):
        mask = np.array([[1, 0, 1],
                         [0, 0, 1],
                         [1, 0, 0]], dtype=bool)
        labels, _ = connected_components(mask)
        assert labels[0, 0] == 1
        assert labels[0, 2] == labels[1, 2] == 2
        assert labels[2, 0] == 3


def zones(arr, res=20.0):
    return ZoneMask(np.asarray(arr, dtype=np.uint8), res)


class TestRetainOcean:
    def test_single_blob_unchanged(self):
        z = zones([[GLACIER, GLACIER], [OCEAN, OCEAN]])
        out, found = retain_ocean(z)
        assert found
        np.testing.assert_array_equal(out.labels, z.labels)

    def test_smaller_blob_reassigned(self):
        grid = np.full((5, 5), GLACIER, dtype=np.uint8)
        grid[4, :] = OCEAN            # 5 px blob
        grid[0, 0:3] = OCEAN          # 3 px blob
        out, found = retain_ocean(zones(grid))
        assert found
        assert np.all(out.labels[0, 0:3] == GLACIER)
        assert np.all(out.labels[4, :] == OCEAN)

    def test_no_ocean_flagged(self):
        z = zones(np.full((3, 3), GLACIER))
        out, found = retain_ocean(z)
        assert not found
        np.testing.assert_array_equal(out.labels, z.labels)

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        grid = rng.integers(0, 4, size=(12, 12)).astype(np.uint8)
        once, _ = retain_ocean(zones(grid))
        twice, _ = retain_ocean(once)
        np.testing.assert_array_equal(once.labels, twice.labels)

    def test_random_masks_one_max_component(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            grid = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
            out, found = retain_ocean(zones(grid))
            if not found:
                assert not (grid == OCEAN).any()
                continue
            labels, sizes = connected_components(out.labels == OCEAN)
            assert len(sizes) == 1
            # The kept component is a maximum-size one of the original mask.
            _, orig_sizes = connected_components(grid == OCEAN)
            assert sizes[0] == orig_sizes.max()
            # Nothing else changed except ocean -> glacier.
            changed = grid != out.labels
            assert np.all(grid[changed] == OCEAN)
            assert np.all(out.labels[changed] == GLACIER)


class TestExtractFront:
    def test_vertical_interface(self):
        grid = np.full((8, 8), GLACIER, dtype=np.uint8)
        grid[:, 4:] = OCEAN
        front = extract_front(zones(grid))
        assert front.as_set() == {(r, 3) for r in range(8)}

    def test_enclosed_glacier_empty_front(self):
        grid = np.full((8, 8), ROCK, dtype=np.uint8)
        grid[2:4, 2:4] = GLACIER      # glacier ringed by rock
        grid[6:, :] = OCEAN           # ocean not adjacent to it
        front = extract_front(zones(grid))
        assert len(front) == 0

    def test_front_pixels_are_glacier_with_ocean_neighbor(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            grid = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
            kept, found = retain_ocean(zones(grid))
            front = extract_front(kept)
            ocean = kept.labels == OCEAN
            for r, c in front.pixels:
                assert kept.labels[r, c] == GLACIER
                neighbors = []
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < 16 and 0 <= nc < 16:
                        neighbors.append(ocean[nr, nc])
                assert any(neighbors)

    def test_adjacency_scan_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            grid = rng.integers(0, 4, size=(16, 16)).astype(np.uint8)
            front = extract_front(zones(grid))
            expected = set()
            for r in range(16):
                for c in range(16):
                    if grid[r, c] != GLACIER:
                        continue
                    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                        nr, nc = r + dr, c + dc
                        if 0 <= nr < 16 and 0 <= nc < 16 and grid[nr, nc] == OCEAN:
                            expected.add((r, c))
                            break
            assert front.as_set() == expected

    def test_delineate_no_ocean(self):
        front, found = delineate(zones(np.full((4, 4), GLACIER)))
        assert not found
        assert len(front) == 0


class TestCrop:
    def test_crop_box(self):
        grid = np.arange(16).reshape(4, 4) % 4
        out = crop_zone_mask(zones(grid), (1, 1, 3, 4))
        np.testing.assert_array_equal(out.labels, np.asarray(grid)[1:3, 1:4])

    def test_bad_box(self):
        with pytest.raises(ConfigError):
            crop_zone_mask(zones(np.zeros((4, 4))), (2, 0, 1, 4))


class TestFrontFiles:
    def test_round_trip(self, tmp_path):
        front = FrontSet([(3, 4), (1, 2), (3, 1)], 20.0)
        path = tmp_path / "front.txt"
        write_front(front, path)
        again = read_front(path)
        assert again == front

    def test_byte_identical_rewrite(self, tmp_path):
        front = FrontSet([(5, 5), (0, 9)], 17.0)
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        write_front(front, p1)
        write_front(read_front(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_header(self, tmp_path):
        path = tmp_path / "naked.txt"
        path.write_text("1,2\n")
        with pytest.raises(Exception) as exc:
            read_front(path)
        assert "resolution_m" in str(exc.value)

    def test_bad_line_names_file(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("# resolution_m=20.0\n1;2\n")
        with pytest.raises(Exception) as exc:
            read_front(path)
        assert "bad.txt" in str(exc.value)

    def test_empty_front_allowed(self, tmp_path):
        front = FrontSet([], 20.0)
        path = tmp_path / "empty.txt"
        write_front(front, path)
        assert len(read_front(path)) == 0
