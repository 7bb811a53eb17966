"""Deterministic synthetic SAR-like scene generator.

Each scene is a four-zone landscape: glacier above a wavy calving front,
ocean below it, bright rock outcrops on the glacier, and dark NA wedges in
the top corners (swath-edge analog). Intensity is per-zone base level times
multiplicative exponential speckle, clipped to [0, 1]; NA areas carry a
constant near-zero level. Winter scenes blend a patchy ice-melange band into
the ocean next to the front, pushing its texture toward the glacier's - the
hard case.

Everything is a pure function of the config seed, so regenerating a scene is
bit-reproducible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .postprocess import GLACIER, NA, OCEAN, ROCK, FrontSet, ZoneMask, delineate

FORMAT_VERSION = 1


@dataclass
class SynthConfig:
    seed: int = 0
    size: tuple[int, int] = (96, 96)
    resolution_m: float = 20.0
    # Per-zone base intensities (NA, rock, glacier, ocean).
    zone_levels: tuple[float, float, float, float] = (0.03, 0.85, 0.55, 0.20)
    speckle: float = 0.35
    front_waviness: float = 0.06
    melange_prob: float = 0.0
    melange_width: int = 8

    def __post_init__(self):
        h, w = self.size
        if h < 64 or w < 64:
            raise ConfigError(f"scene size must be at least 64x64, got {h}x{w}")
        if not 0.0 <= self.speckle <= 1.0:
            raise ConfigError("speckle strength must lie in [0, 1]")
        if not 0.0 <= self.melange_prob <= 1.0:
            raise ConfigError("melange_prob must lie in [0, 1]")


@dataclass
class Scene:
    intensity: np.ndarray        # float32 in [0, 1]
    zones: np.ndarray            # uint8 in {0..3}
    resolution_m: float
    front_gt: FrontSet
    id: str
    tags: dict[str, str] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Scene)
                and self.id == other.id
                and self.resolution_m == other.resolution_m
                and self.tags == other.tags
                and np.array_equal(self.intensity, other.intensity)
                and np.array_equal(self.zones, other.zones)
                and self.front_gt == other.front_gt)

    def zone_mask(self) -> ZoneMask:
        return ZoneMask(self.zones, self.resolution_m)


def _front_curve(rng: np.random.Generator, h: int, w: int, waviness: float) -> np.ndarray:
    cols = np.arange(w)
    curve = np.full(w, h * rng.uniform(0.45, 0.60))
    amp = h * waviness
    for k in range(3):
        freq = rng.uniform(0.5, 2.5)
        phase = rng.uniform(0.0, 2 * np.pi)
        curve = curve + amp / (k + 1) * np.sin(2 * np.pi * freq * cols / w + phase)
    return np.clip(np.round(curve).astype(np.int64), int(0.30 * h), int(0.70 * h))


def _blob_field(rng: np.random.Generator, h: int, w: int, cell: int = 8) -> np.ndarray:
    """Smooth random field in [0, 1] from bilinear-upsampled coarse noise."""
    gh, gw = h // cell + 2, w // cell + 2
    coarse = rng.random((gh, gw))
    ry = np.linspace(0, gh - 1.001, h)
    rx = np.linspace(0, gw - 1.001, w)
    y0 = ry.astype(int)
    x0 = rx.astype(int)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    tl = coarse[np.ix_(y0, x0)]
    tr = coarse[np.ix_(y0, x0 + 1)]
    bl = coarse[np.ix_(y0 + 1, x0)]
    br = coarse[np.ix_(y0 + 1, x0 + 1)]
    return tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx + bl * fy * (1 - fx) + br * fy * fx


def generate_scene(cfg: SynthConfig, scene_id: str = "scene_0000") -> Scene:
    """Build one scene from the config seed. Same config -> identical scene."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.size
    front_rows = _front_curve(rng, h, w, cfg.front_waviness)

    rows = np.arange(h)[:, None]
    zones = np.where(rows > front_rows[None, :], OCEAN, GLACIER).astype(np.uint8)

    # Rock outcrops: ellipses kept clear of the front band so the
    # glacier/ocean interface stays a single curve.
    front_margin = 4
    safe_row = int(front_rows.min()) - front_margin
    cc, rr = np.meshgrid(np.arange(w), np.arange(h))
    for _ in range(int(rng.integers(1, 4))):
        ry = int(rng.integers(3, max(4, h // 12)))
        rx = int(rng.integers(4, max(5, w // 8)))
        if safe_row - ry <= ry + 1:
            break
        cy = int(rng.integers(ry + 1, safe_row - ry))
        cx = int(rng.integers(0, w))
        ellipse = ((rr - cy) / ry) ** 2 + ((cc - cx) / rx) ** 2 <= 1.0
        zones[ellipse & (zones == GLACIER) & (rr < safe_row)] = ROCK

    # NA wedges in the top corners, above every rock/front structure.
    na = int(min(h // 8, safe_row // 2))
    if na > 2:
        zones[(rr + cc) < na] = NA
        zones[(rr + (w - 1 - cc)) < na] = NA

    season = "winter" if rng.random() < cfg.melange_prob else "summer"

    levels = np.asarray(cfg.zone_levels, dtype=np.float64)
    base = levels[zones]
    if season == "winter":
        dist_to_front = rows - front_rows[None, :]
        band = (zones == OCEAN) & (dist_to_front <= cfg.melange_width)
        patches = _blob_field(rng, h, w) > 0.35
        melange = band & patches
        base = np.where(melange, levels[GLACIER] + 0.05 * (_blob_field(rng, h, w) - 0.5),
                        base)

    s = cfg.speckle
    speckle = (1.0 - s) + s * rng.exponential(1.0, size=(h, w))
    intensity = np.clip(base * speckle, 0.0, 1.0)
    intensity = np.where(zones == NA, levels[NA], intensity).astype(np.float32)

    front, found = delineate(ZoneMask(zones, cfg.resolution_m))
    assert found, "generator invariant: every scene has an ocean region"
    _assert_single_ocean(zones)
    return Scene(intensity=intensity, zones=zones, resolution_m=cfg.resolution_m,
                 front_gt=front, id=scene_id,
                 tags={"season": season, "seed": str(cfg.seed)})


def _assert_single_ocean(zones: np.ndarray) -> None:
    from .postprocess import connected_components
    _, sizes = connected_components(zones == OCEAN)
    assert len(sizes) == 1, "generator invariant: ocean must be one 4-connected region"


def generate_scenes(cfg: SynthConfig, count: int) -> list[Scene]:
    """Scenes 0..count-1 with per-scene seeds cfg.seed + index."""
    return [generate_scene(replace(cfg, seed=cfg.seed + i), f"scene_{i:04d}")
            for i in range(count)]


# -- scene files -------------------------------------------------------------
#
# A scene directory holds:
#   scene.hdr       text header: width/height/resolution_m/id/tags
#   intensity.u16   16-bit little-endian raw raster (value * 65535, rounded)
#   zones.u8        8-bit raw raster of zone labels
#   front.txt       '# resolution_m=...' header plus one 'row,col' per line

def write_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = scene.zones.shape
    tag_lines = "".join(f"tag.{k}={v}\n" for k, v in sorted(scene.tags.items()))
    (d / "scene.hdr").write_text(
        f"format_version={FORMAT_VERSION}\nwidth={w}\nheight={h}\n"
        f"resolution_m={scene.resolution_m!r}\nid={scene.id}\n{tag_lines}")
    quant = np.round(scene.intensity.astype(np.float64) * 65535.0).astype("<u2")
    (d / "intensity.u16").write_bytes(quant.tobytes())
    (d / "zones.u8").write_bytes(scene.zones.astype(np.uint8).tobytes())
    from .postprocess import write_front
    write_front(scene.front_gt, d / "front.txt")


def _parse_header(path: Path) -> dict[str, str]:
    if not path.exists():
        raise ParseError(f"{path}: missing scene header")
    kv = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    for key in ("width", "height", "resolution_m", "id"):
        if key not in kv:
            raise ParseError(f"{path}: missing field '{key}'")
    return kv


def read_scene(directory) -> Scene:
    d = Path(directory)
    kv = _parse_header(d / "scene.hdr")
    try:
        w, h = int(kv["width"]), int(kv["height"])
        resolution = float(kv["resolution_m"])
    except ValueError as exc:
        raise ParseError(f"{d / 'scene.hdr'}: bad numeric field: {exc}") from exc
    tags = {k[len("tag."):]: v for k, v in kv.items() if k.startswith("tag.")}

    raw = (d / "intensity.u16")
    if not raw.exists():
        raise ParseError(f"{raw}: missing intensity raster")
    blob = raw.read_bytes()
    if len(blob) != h * w * 2:
        raise ParseError(f"{raw}: expected {h * w * 2} bytes, found {len(blob)}")
    intensity = (np.frombuffer(blob, dtype="<u2").reshape(h, w).astype(np.float32)
                 / np.float32(65535.0))

    zraw = d / "zones.u8"
    if not zraw.exists():
        raise ParseError(f"{zraw}: missing zone raster")
    zblob = zraw.read_bytes()
    if len(zblob) != h * w:
        raise ParseError(f"{zraw}: expected {h * w} bytes, found {len(zblob)}")
    zones = np.frombuffer(zblob, dtype=np.uint8).reshape(h, w).copy()
    if zones.max() > OCEAN:
        raise ParseError(f"{zraw}: zone labels outside 0..3")

    from .postprocess import read_front
    front = read_front(d / "front.txt")
    return Scene(intensity=intensity, zones=zones, resolution_m=resolution,
                 front_gt=front, id=kv["id"], tags=tags)


def scene_dirs(root) -> list[Path]:
    """Scene subdirectories of a dataset root, sorted by name."""
    root = Path(root)
    return sorted(p for p in root.iterdir() if (p / "scene.hdr").exists())
