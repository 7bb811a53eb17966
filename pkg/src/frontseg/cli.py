"""Command-line pipeline: synth -> train -> infer -> delineate -> evaluate,
plus the ablation sweep.

Every command reads an optional flat `key = value` config file (flags win),
writes a manifest next to its outputs, and is byte-deterministic for a fixed
seed (manifests carry wall time and are exempt). Exit codes: 0 success,
2 usage/config, 3 missing input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    MissingInputError,
    ParseError,
    ShapeError,
)
from .layers import softmax
from .losses import LossWeights
from .metrics import EvalRecord, confusion, format_table, fronts_csv, grouped_report, segmentation_csv
from .model import ABLATION_LADDER, ModelConfig, TwoBranchNet, load_checkpoint, save_checkpoint
from .patches import extract_pairs, merge_predictions, stack_pairs
from .postprocess import (
    FrontSet,
    delineate,
    read_front,
    read_zone_raster,
    write_front,
    write_zone_raster,
)
from .synth import SynthConfig, generate_scenes, read_scene, scene_dirs, write_scene
from .train import TrainConfig, train, validation_iou

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"config file not found: {p}")
    for ln, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{p}:{ln}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Resolver:
    """Merge CLI flags (dest defaults None) over config-file values over
    defaults, remembering the resolved snapshot for the manifest."""

    def __init__(self, args: argparse.Namespace):
        self.file_cfg = parse_config_file(args.config) if args.config else {}
        self.args = args
        self.snapshot: dict[str, str] = {}

    def get(self, key: str, default, cast=str):
        flag_val = getattr(self.args, key, None)
        if flag_val is not None:
            value = flag_val
        elif key in self.file_cfg:
            raw = self.file_cfg[key]
            value = (raw.lower() in ("1", "true", "yes")) if cast is bool else cast(raw)
        else:
            value = default
        self.snapshot[key] = repr(value) if isinstance(value, float) else str(value)
        return value


def write_manifest(out_dir: Path, command: str, resolver: Resolver,
                   wall_time_s: float, extra: dict[str, str] | None = None) -> None:
    lines = [f"command={command}", f"version={__version__}",
             f"wall_time_s={wall_time_s:.3f}"]
    lines += [f"{k}={v}" for k, v in sorted(resolver.snapshot.items())]
    if extra:
        lines += [f"{k}={v}" for k, v in sorted(extra.items())]
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _load_scenes(root) -> list:
    root = Path(root)
    if not root.exists():
        raise MissingInputError(f"scene directory not found: {root}")
    dirs = scene_dirs(root)
    if not dirs:
        raise MissingInputError(f"no scenes under {root}")
    return [read_scene(d) for d in dirs]


def split_scenes(scenes, seed: int, val_fraction: float = 0.1):
    """Deterministic validation split: shuffled by seed, first 10% held out."""
    order = np.random.default_rng(seed).permutation(len(scenes))
    n_val = max(1, int(round(len(scenes) * val_fraction)))
    if n_val >= len(scenes):
        raise ConfigError(f"{len(scenes)} scenes cannot support a validation split")
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(scenes) if i not in val_idx]
    val = [s for i, s in enumerate(scenes) if i in val_idx]
    return train, val


# -- synth ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.perf_counter()
    res = Resolver(args)
    out = Path(args.out)
    n = res.get("n", 20, int)
    size = res.get("size", 96, int)
    cfg = SynthConfig(seed=res.get("seed", 0, int),
                      size=(size, size),
                      resolution_m=res.get("resolution_m", 20.0, float),
                      speckle=res.get("speckle", 0.35, float),
                      front_waviness=res.get("front_waviness", 0.06, float),
                      melange_prob=res.get("melange_prob", 0.0, float),
                      melange_width=res.get("melange_width", 8, int))
    scenes = generate_scenes(cfg, n)
    for scene in scenes:
        write_scene(scene, out / scene.id)
    winter = sum(1 for s in scenes if s.tags.get("season") == "winter")
    write_manifest(out, "synth", res, time.perf_counter() - started,
                   {"scenes": str(n), "winter_scenes": str(winter)})
    print(f"wrote {n} scenes to {out} ({winter} winter)")
    return EXIT_OK


# -- train ---------------------------------------------------------------------

def _train_configs(args, res: Resolver):
    toy = bool(getattr(args, "toy", False))
    res.snapshot["toy"] = str(toy)
    mcfg = ModelConfig(variant=res.get("variant", "amd_hooknet"),
                       base_channels=res.get("base_channels", 8 if toy else 32, int),
                       class_count=4,
                       token_cap=res.get("token_cap", 2304, int))
    tcfg = TrainConfig(lr0=res.get("lr0", 0.001, float),
                       decay=res.get("decay", 0.99, float),
                       epochs=res.get("epochs", 30 if toy else 300, int),
                       batch_size=res.get("batch_size", 8 if toy else 30, int),
                       seed=res.get("seed", 0, int),
                       patch_size=res.get("patch", 64 if toy else 288, int),
                       stride=res.get("stride", 32 if toy else 144, int),
                       weights=LossWeights(res.get("lambda1", 1.0, float),
                                           res.get("lambda2", 1.0, float),
                                           res.get("lambda3", 0.5, float)),
                       weight_decay=res.get("weight_decay", 1e-4, float))
    return mcfg, tcfg


def cmd_train(args) -> int:
    started = time.perf_counter()
    res = Resolver(args)
    out = Path(args.out)
    mcfg, tcfg = _train_configs(args, res)
    scenes = _load_scenes(args.scenes)
    train_scenes, val_scenes = split_scenes(scenes, tcfg.seed,
                                            res.get("val_fraction", 0.1, float))
    model, report = train(mcfg, train_scenes, val_scenes, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint.bin")
    (out / "report.csv").write_text(report.to_csv())
    write_manifest(out, "train", res, time.perf_counter() - started,
                   {"best_checkpoint": report.best_checkpoint_id,
                    "best_val_iou": "" if report.best_val_iou is None
                    else f"{report.best_val_iou:.6f}",
                    "train_scenes": str(len(train_scenes)),
                    "val_scenes": str(len(val_scenes))})
    best = "n/a" if report.best_val_iou is None else f"{report.best_val_iou:.4f}"
    print(f"trained {mcfg.variant} for {tcfg.epochs} epochs; "
          f"best val IoU {best} at {report.best_checkpoint_id}")
    return EXIT_OK


# -- infer ---------------------------------------------------------------------

def _infer_scene(model: TwoBranchNet, scene, patch: int, stride: int,
                 batch_size: int, dump_attention: bool):
    pairs = extract_pairs(scene, patch, stride)
    model.set_training(False)
    items = []
    attn_dump = None
    for lo in range(0, len(pairs), batch_size):
        chunk = pairs[lo:lo + batch_size]
        t, c, _, _ = stack_pairs(chunk)
        keep = dump_attention and lo == 0
        outs = model.forward(t, None if model.context is None else c,
                             keep_attention=keep)
        if keep and outs.attention_maps:
            attn_dump = outs.attention_maps
        probs = softmax(outs.target_logits, axis=1)
        for p, pr in zip(chunk, probs):
            items.append((p.offset, pr.astype(np.float64)))
    mask = merge_predictions(items, scene.zones.shape, scene.resolution_m)
    return mask, attn_dump


def _write_attention(dump, out: Path, scene_id: str) -> None:
    for depth, weights in sorted(dump.items()):
        arr = np.ascontiguousarray(weights.astype("<f4"))
        stem = out / f"{scene_id}.attn_d{depth}"
        shape_txt = "x".join(str(d) for d in arr.shape)
        stem.with_name(stem.name + ".hdr").write_text(
            f"depth={depth}\nshape={shape_txt}\ndtype=float32-le\n")
        stem.with_name(stem.name + ".bin").write_bytes(arr.tobytes())


def cmd_infer(args) -> int:
    started = time.perf_counter()
    res = Resolver(args)
    out = Path(args.out)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise MissingInputError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    patch = res.get("patch", 64, int)
    stride = res.get("stride", patch // 2, int)
    batch_size = res.get("batch_size", 8, int)
    jobs = res.get("jobs", 1, int)
    dump_attention = bool(getattr(args, "dump_attention", False))
    res.snapshot["dump_attention"] = str(dump_attention)

    roots = scene_dirs(Path(args.scenes))
    if not roots:
        raise MissingInputError(f"no scenes under {args.scenes}")
    out.mkdir(parents=True, exist_ok=True)

    def run_one(root):
        scene = read_scene(root)
        mask, attn = _infer_scene(model, scene, patch, stride, batch_size,
                                  dump_attention)
        return scene.id, mask, attn

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, roots))
    else:
        results = [run_one(r) for r in roots]

    for scene_id, mask, attn in results:
        write_zone_raster(mask, out, scene_id)
        if attn:
            _write_attention(attn, out, scene_id)
    write_manifest(out, "infer", res, time.perf_counter() - started,
                   {"checkpoint": str(ckpt), "scenes": str(len(results)),
                    "variant": model.cfg.variant})
    print(f"inferred {len(results)} scenes with {model.cfg.variant} -> {out}")
    return EXIT_OK


# -- delineate -------------------------------------------------------------------

def cmd_delineate(args) -> int:
    started = time.perf_counter()
    res = Resolver(args)
    pred = Path(args.pred)
    out = Path(args.out)
    if not pred.exists():
        raise MissingInputError(f"prediction directory not found: {pred}")
    stems = sorted(p.name[:-len(".zones.u8")] for p in pred.glob("*.zones.u8"))
    if not stems:
        raise MissingInputError(f"no zone rasters under {pred}")
    out.mkdir(parents=True, exist_ok=True)
    empty = 0
    for stem in stems:
        mask = read_zone_raster(pred, stem)
        front, found = delineate(mask)
        empty += not found or len(front) == 0
        write_front(front, out / f"{stem}.front.txt")
    write_manifest(out, "delineate", res, time.perf_counter() - started,
                   {"rasters": str(len(stems)), "empty_fronts": str(empty)})
    print(f"delineated {len(stems)} rasters ({empty} empty) -> {out}")
    return EXIT_OK


# -- evaluate --------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    res = Resolver(args)
    pred = Path(args.pred)
    out = Path(args.out)
    group_by = res.get("group_by", "", str) or None
    scenes = _load_scenes(args.gt)
    records = []
    for scene in scenes:
        front_path = pred / f"{scene.id}.front.txt"
        if not front_path.exists():
            raise MissingInputError(f"missing predicted front: {front_path}")
        pred_front = read_front(front_path)
        counts = None
        if (pred / f"{scene.id}.zones.u8").exists():
            pred_mask = read_zone_raster(pred, scene.id)
            counts = confusion(pred_mask, scene.zone_mask())
        records.append(EvalRecord(scene_id=scene.id, tags=scene.tags,
                                  gt_front=scene.front_gt, pred_front=pred_front,
                                  counts=counts))
    reports = grouped_report(records, group_by)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fronts.csv").write_text(fronts_csv(reports))
    if any(r.per_class for r in reports):
        (out / "segmentation.csv").write_text(segmentation_csv(reports))
    table = format_table(reports)
    (out / "table.txt").write_text(table)
    write_manifest(out, "evaluate", res, time.perf_counter() - started,
                   {"scenes": str(len(records))})
    print(table, end="")
    return EXIT_OK


# -- ablate ----------------------------------------------------------------------

def _run_variant(variant: str, scenes, tcfg: TrainConfig, base_channels: int,
                 token_cap: int):
    """Train one variant and evaluate it on the held-out scenes."""
    mcfg = ModelConfig(variant=variant, base_channels=base_channels,
                       token_cap=token_cap)
    train_scenes, val_scenes = split_scenes(scenes, tcfg.seed)
    model, report = train(mcfg, train_scenes, val_scenes, tcfg)
    records = []
    for scene in val_scenes:
        mask, _ = _infer_scene(model, scene, tcfg.patch_size, tcfg.stride,
                               tcfg.batch_size, dump_attention=False)
        front, _ = delineate(mask)
        records.append(EvalRecord(scene_id=scene.id, tags=scene.tags,
                                  gt_front=scene.front_gt, pred_front=front,
                                  counts=confusion(mask, scene.zone_mask())))
    rep = grouped_report(records, None)[0]
    return {"variant": variant, "val_iou": report.best_val_iou,
            "precision": rep.macro.precision, "recall": rep.macro.recall,
            "f1": rep.macro.f1, "iou": rep.macro.iou,
            "mde_m": rep.mde_m, "empty": rep.empty_count}


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    mean = sum(vals) / len(vals)
    std = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
    return mean, std


def cmd_ablate(args) -> int:
    started = time.perf_counter()
    res = Resolver(args)
    out = Path(args.out)
    _, tcfg = _train_configs(args, res)
    base_channels = res.get("base_channels", 8 if getattr(args, "toy", False) else 32,
                            int)
    token_cap = res.get("token_cap", 2304, int)
    repeats = res.get("repeats", 1, int)
    scenes = _load_scenes(args.scenes)

    rows = []
    per_variant: dict[str, list[dict]] = {}
    for variant in ABLATION_LADDER:
        for rep_i in range(repeats):
            run_cfg = TrainConfig(**{**tcfg.__dict__, "seed": tcfg.seed + rep_i})
            result = _run_variant(variant, scenes, run_cfg, base_channels, token_cap)
            per_variant.setdefault(variant, []).append(result)

    def fmt(mean, std):
        if mean is None:
            return ""
        return f"{mean:.4f}±{std:.4f}"

    lines = ["variant,precision,recall,f1,iou,mde_m,empty_total"]
    table = [f"{'variant':<28}{'precision':>16}{'recall':>16}{'f1':>16}"
             f"{'iou':>16}{'mde_m':>18}"]
    for variant in ABLATION_LADDER:
        runs = per_variant[variant]
        cells_csv = []
        cells_txt = []
        for key in ("precision", "recall", "f1", "iou", "mde_m"):
            mean, std = _mean_std([r[key] for r in runs])
            cells_csv.append("" if mean is None else f"{mean:.6f}±{std:.6f}")
            cells_txt.append(fmt(mean, std))
        empty_total = sum(r["empty"] for r in runs)
        lines.append(f"{variant}," + ",".join(cells_csv) + f",{empty_total}")
        table.append(f"{variant:<28}" + "".join(f"{c:>16}" for c in cells_txt[:4])
                     + f"{cells_txt[4]:>18}")
        rows.append((variant, runs))

    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    (out / "ablation.txt").write_text("\n".join(table) + "\n")
    write_manifest(out, "ablate", res, time.perf_counter() - started,
                   {"repeats": str(repeats), "variants": ",".join(ABLATION_LADDER)})
    print("\n".join(table))
    return EXIT_OK


# -- parser / dispatch -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="frontseg",
        description="Synthetic glacier calving-front segmentation pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed (default 0)")

    p = sub.add_parser("synth", help="generate synthetic scenes")
    common(p)
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--n", type=int, help="number of scenes (default 20)")
    p.add_argument("--size", type=int, help="scene side in pixels (default 96)")
    p.add_argument("--resolution-m", dest="resolution_m", type=float,
                   help="meters per pixel (default 20)")
    p.add_argument("--speckle", type=float, help="speckle strength 0..1")
    p.add_argument("--front-waviness", dest="front_waviness", type=float)
    p.add_argument("--melange-prob", dest="melange_prob", type=float,
                   help="probability a scene is a winter/melange scene")
    p.add_argument("--melange-width", dest="melange_width", type=int)
    p.set_defaults(func=cmd_synth)

    def train_flags(p):
        p.add_argument("--variant", choices=sorted(
            ["baseline_unet"] + ABLATION_LADDER))
        p.add_argument("--base-channels", dest="base_channels", type=int)
        p.add_argument("--token-cap", dest="token_cap", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr0", type=float)
        p.add_argument("--decay", type=float)
        p.add_argument("--patch", type=int)
        p.add_argument("--stride", type=int)
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)
        p.add_argument("--lambda3", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--val-fraction", dest="val_fraction", type=float)
        p.add_argument("--toy", action="store_true",
                       help="desk-scale defaults (base 8, 64-px patches, 30 epochs)")

    p = sub.add_parser("train", help="train a model on synthetic scenes")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sliding-window zone inference")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--jobs", type=int, help="parallel scene workers (default 1)")
    p.add_argument("--dump-attention", dest="dump_attention", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("delineate", help="zone rasters -> 1-pixel front files")
    common(p)
    p.add_argument("--pred", required=True, help="directory of *.zones.u8 rasters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_delineate)

    p = sub.add_parser("evaluate", help="metrics against ground-truth scenes")
    common(p)
    p.add_argument("--pred", required=True,
                   help="directory of *.front.txt (and optional *.zones.u8)")
    p.add_argument("--gt", required=True, help="ground-truth scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--group-by", dest="group_by", help="tag key, e.g. season")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate the variant ladder")
    common(p)
    p.add_argument("--scenes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, help="seeded repeats per variant")
    train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, ShapeError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DivergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
