"""From merged zone predictions to a 1-pixel calving front.

The pipeline keeps exactly one ocean region (largest connected component,
remaining ocean pixels are reassigned to glacier) and then reads the front
as every glacier pixel 4-adjacent to that ocean region. Front pixels sit on
the glacier side of the interface; the same convention is used for ground
truth and predictions so distance errors are side-consistent.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError

NA, ROCK, GLACIER, OCEAN = 0, 1, 2, 3
ZONE_NAMES = {NA: "na", ROCK: "rock", GLACIER: "glacier", OCEAN: "ocean"}

# Connectivity used by the whole pipeline (CCA and front adjacency). 8 is
# supported by connected_components for comparison runs.
CONNECTIVITY = 4

_OFFSETS = {4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
            8: ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))}


@dataclass
class ZoneMask:
    """Zone-label raster over {0: NA, 1: rock, 2: glacier, 3: ocean}."""
    labels: np.ndarray
    resolution_m: float

    def copy(self) -> "ZoneMask":
        return ZoneMask(self.labels.copy(), self.resolution_m)


@dataclass
class FrontSet:
    """Front pixel coordinates (row, col), kept sorted row-major."""
    pixels: np.ndarray  # (K, 2) int64
    resolution_m: float

    def __init__(self, pixels, resolution_m: float):
        arr = np.asarray(list(pixels) if not isinstance(pixels, np.ndarray) else pixels,
                         dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((arr[:, 1], arr[:, 0]))
        self.pixels = arr[order]
        self.resolution_m = float(resolution_m)

    def __len__(self) -> int:
        return len(self.pixels)

    def __eq__(self, other) -> bool:
        return (isinstance(other, FrontSet)
                and self.resolution_m == other.resolution_m
                and np.array_equal(self.pixels, other.pixels))

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(r), int(c)) for r, c in self.pixels}


def connected_components(mask: np.ndarray, connectivity: int = 4):
    """Label connected true regions of a boolean raster.

    Returns (labels, sizes): labels is int32 with 0 for background and
    components numbered 1..K in order of first appearance (row-major scan);
    sizes[k] is the pixel count of component k+1.
    """
    if connectivity not in _OFFSETS:
        raise ConfigError(f"connectivity must be 4 or 8, got {connectivity}")
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    sizes: list[int] = []
    offsets = _OFFSETS[connectivity]
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or labels[r, c]:
                continue
            lab = len(sizes) + 1
            size = 0
            queue = deque([(r, c)])
            labels[r, c] = lab
            while queue:
                cr, cc = queue.popleft()
                size += 1
                for dr, dc in offsets:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not labels[nr, nc]:
                        labels[nr, nc] = lab
                        queue.append((nr, nc))
            sizes.append(size)
    return labels, np.asarray(sizes, dtype=np.int64)


def retain_ocean(z: ZoneMask) -> tuple[ZoneMask, bool]:
    """Keep exactly one ocean region (largest; ties break to the earliest in
    scan order) and reassign every other ocean pixel to glacier.

    Returns (mask, ocean_found); with no ocean pixels the mask is returned
    unchanged and the flag is False.
    """
    ocean = z.labels == OCEAN
    if not ocean.any():
        return z.copy(), False
    labels, sizes = connected_components(ocean, CONNECTIVITY)
    keep = int(np.argmax(sizes)) + 1  # argmax takes the first max: scan order
    out = z.labels.copy()
    out[(labels != keep) & ocean] = GLACIER
    return ZoneMask(out, z.resolution_m), True


def extract_front(z: ZoneMask) -> FrontSet:
    """Glacier pixels 4-adjacent to ocean. Callers wanting the single-front
    convention apply retain_ocean first."""
    lab = z.labels
    ocean = lab == OCEAN
    near_ocean = np.zeros_like(ocean)
    near_ocean[1:, :] |= ocean[:-1, :]
    near_ocean[:-1, :] |= ocean[1:, :]
    near_ocean[:, 1:] |= ocean[:, :-1]
    near_ocean[:, :-1] |= ocean[:, 1:]
    front = (lab == GLACIER) & near_ocean
    return FrontSet(np.argwhere(front), z.resolution_m)


def delineate(z: ZoneMask) -> tuple[FrontSet, bool]:
    """retain_ocean + extract_front; the standard postprocessing chain."""
    kept, found = retain_ocean(z)
    if not found:
        return FrontSet(np.empty((0, 2), dtype=np.int64), z.resolution_m), False
    return extract_front(kept), True


def crop_zone_mask(z: ZoneMask, box: tuple[int, int, int, int]) -> ZoneMask:
    """Optional bounding-box restriction (r0, c0, r1, c1), end-exclusive."""
    r0, c0, r1, c1 = box
    h, w = z.labels.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ConfigError(f"crop box {box} outside raster {h}x{w}")
    return ZoneMask(z.labels[r0:r1, c0:c1].copy(), z.resolution_m)


# -- raster / front file io ---------------------------------------------------

def write_zone_raster(z: ZoneMask, directory, stem: str) -> None:
    """Write `<stem>.zones.u8` plus its text header into directory."""
    from pathlib import Path
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = z.labels.shape
    (d / f"{stem}.zones.hdr").write_text(
        f"width={w}\nheight={h}\nresolution_m={z.resolution_m!r}\n")
    (d / f"{stem}.zones.u8").write_bytes(z.labels.astype(np.uint8).tobytes())


def read_zone_raster(directory, stem: str) -> ZoneMask:
    from pathlib import Path
    d = Path(directory)
    hdr = d / f"{stem}.zones.hdr"
    raw = d / f"{stem}.zones.u8"
    if not hdr.exists() or not raw.exists():
        raise FileNotFoundError(f"zone raster '{stem}' not found in {d}")
    kv = {}
    for line in hdr.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    try:
        h, w = int(kv["height"]), int(kv["width"])
        resolution = float(kv["resolution_m"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{hdr}: bad or missing field: {exc}") from exc
    blob = raw.read_bytes()
    if len(blob) != h * w:
        raise ParseError(f"{raw}: expected {h * w} bytes, found {len(blob)}")
    labels = np.frombuffer(blob, dtype=np.uint8).reshape(h, w).copy()
    if labels.max() > OCEAN:
        raise ParseError(f"{raw}: zone labels outside 0..3")
    return ZoneMask(labels, resolution)


def write_front(front: FrontSet, path) -> None:
    lines = [f"# resolution_m={front.resolution_m!r}\n"]
    lines += [f"{r},{c}\n" for r, c in front.pixels]
    with open(path, "w") as fh:
        fh.writelines(lines)


def read_front(path) -> FrontSet:
    resolution = None
    pixels = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "resolution_m=" in line:
                    try:
                        resolution = float(line.split("resolution_m=")[1])
                    except ValueError as exc:
                        raise ParseError(f"{path}:{ln}: bad resolution_m") from exc
                continue
            try:
                r, c = line.split(",")
                pixels.append((int(r), int(c)))
            except ValueError as exc:
                raise ParseError(f"{path}:{ln}: expected 'row,col', got {line!r}") from exc
    if resolution is None:
        raise ParseError(f"{path}: missing '# resolution_m=' header")
    return FrontSet(pixels, resolution)
