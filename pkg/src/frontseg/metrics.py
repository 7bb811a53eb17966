"""Segmentation metrics (per class and macro) and the mean front-distance
error in meters.

The distance error follows the symmetric nearest-neighbor form: for every
evaluated image pair, directed nearest distances are summed both ways and the
grand total is normalized by the total pixel count of all fronts, then scaled
to meters. Pairs whose prediction found no front are excluded from the sums
and counted separately; a missing ground-truth front is a data error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .postprocess import ZONE_NAMES, FrontSet, ZoneMask

BRUTE_FORCE_LIMIT = 4_000_000  # pairwise-matrix budget before bucketing kicks in


@dataclass
class ConfusionCounts:
    """One-vs-rest pixel counts per class."""
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def class_count(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass
class ClassMetrics:
    precision: float | None
    recall: float | None
    f1: float | None
    iou: float | None


@dataclass
class MetricsReport:
    group: str
    n_images: int
    per_class: dict[int, ClassMetrics] | None
    macro: ClassMetrics | None
    mde_m: float | None
    empty_count: int


def confusion(pred: ZoneMask, gt: ZoneMask, class_count: int = 4) -> ConfusionCounts:
    p, g = pred.labels, gt.labels
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    cm = np.bincount(g.ravel().astype(np.int64) * class_count + p.ravel(),
                     minlength=class_count * class_count).reshape(class_count,
                                                                  class_count)
    tp = np.diag(cm).astype(np.int64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def segmentation_metrics(c: ConfusionCounts):
    """Per-class and macro precision/recall/F1/IoU. Metrics with a zero
    denominator are undefined (None) and excluded from the macro average."""
    per_class: dict[int, ClassMetrics] = {}
    for k in range(c.class_count):
        tp, fp, fn = int(c.tp[k]), int(c.fp[k]), int(c.fn[k])
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        if precision is None or recall is None or precision + recall == 0:
            f1 = None if (precision is None or recall is None) else 0.0
            # 2PR/(P+R) with P=R=0 is 0/0: undefined.
            if precision == 0 and recall == 0:
                f1 = None
        else:
            f1 = 2 * precision * recall / (precision + recall)
        iou = _ratio(tp, tp + fp + fn)
        per_class[k] = ClassMetrics(precision, recall, f1, iou)

    def macro_of(attr):
        vals = [getattr(m, attr) for m in per_class.values()
                if getattr(m, attr) is not None]
        return sum(vals) / len(vals) if vals else None

    macro = ClassMetrics(*(macro_of(a) for a in ("precision", "recall", "f1", "iou")))
    return per_class, macro


# -- nearest-neighbor distances ----------------------------------------------

def _nearest_sum_brute(a: np.ndarray, b: np.ndarray) -> float:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).sum())


def _nearest_sum_bucketed(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of nearest distances from each a-point to b, via a uniform grid."""
    span = max(np.ptp(b[:, 0]), np.ptp(b[:, 1]), 1)
    cell = max(1, int(span / max(1.0, math.sqrt(len(b)))))
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, (r, c) in enumerate(b):
        buckets.setdefault((int(r) // cell, int(c) // cell), []).append(i)
    buckets = {k: b[v] for k, v in buckets.items()}

    total = 0.0
    for r, c in a:
        br, bc = int(r) // cell, int(c) // cell
        best = math.inf
        ring = 0
        while True:
            candidates = []
            for gr in range(br - ring, br + ring + 1):
                for gc in range(bc - ring, bc + ring + 1):
                    if max(abs(gr - br), abs(gc - bc)) == ring and (gr, gc) in buckets:
                        candidates.append(buckets[(gr, gc)])
            if candidates:
                pts = np.concatenate(candidates)
                d = np.sqrt(((pts - (r, c)) ** 2).sum(axis=1).min())
                best = min(best, float(d))
            # Any point in a farther ring is at least (ring)*cell away.
            if best <= ring * cell:
                break
            ring += 1
        total += best
    return total


def nearest_sum(a: np.ndarray, b: np.ndarray) -> float:
    """Sum over a of the Euclidean distance to its nearest b point (pixels)."""
    if len(a) == 0:
        return 0.0
    if len(b) == 0:
        raise DataError("nearest_sum against an empty set")
    a = a.astype(np.float64)
    bb = b.astype(np.float64)
    if len(a) * len(b) <= BRUTE_FORCE_LIMIT:
        return _nearest_sum_brute(a, bb)
    return _nearest_sum_bucketed(a, bb)


def mde(front_pairs) -> tuple[float | None, int]:
    """Mean distance error in meters over (ground truth P, prediction Q) pairs.

    Empty predictions are excluded from the sums and counted; the distance
    normalization is the total front cardinality of the included pairs.
    """
    numerator = 0.0
    denominator = 0
    empty = 0
    for p, q in front_pairs:
        if len(p) == 0:
            raise DataError("ground-truth front is empty; MDE undefined for this pair")
        if len(q) == 0:
            empty += 1
            continue
        if p.resolution_m != q.resolution_m:
            raise DataError(f"front pair resolutions differ: "
                            f"{p.resolution_m} vs {q.resolution_m}")
        sym = nearest_sum(p.pixels, q.pixels) + nearest_sum(q.pixels, p.pixels)
        numerator += sym * p.resolution_m
        denominator += len(p) + len(q)
    if denominator == 0:
        return None, empty
    return numerator / denominator, empty


# -- grouped evaluation -------------------------------------------------------

@dataclass
class EvalRecord:
    """Per-scene evaluation inputs."""
    scene_id: str
    tags: dict[str, str]
    gt_front: FrontSet
    pred_front: FrontSet
    counts: ConfusionCounts | None = None


def grouped_report(records: list[EvalRecord],
                   group_by: str | None = None) -> list[MetricsReport]:
    """One report per tag value plus 'All'. MDE is aggregated over the union
    of pairs per group, not averaged over per-image values."""
    groups: dict[str, list[EvalRecord]] = {"All": list(records)}
    if group_by is not None:
        for rec in records:
            if group_by not in rec.tags:
                raise ConfigError(f"scene {rec.scene_id} has no tag '{group_by}'")
            groups.setdefault(f"{group_by}={rec.tags[group_by]}", []).append(rec)

    reports = []
    for name in ["All"] + sorted(k for k in groups if k != "All"):
        recs = groups[name]
        mde_m, empty = mde([(r.gt_front, r.pred_front) for r in recs])
        counts = [r.counts for r in recs if r.counts is not None]
        per_class = macro = None
        if counts:
            pooled = counts[0]
            for c in counts[1:]:
                pooled = pooled + c
            per_class, macro = segmentation_metrics(pooled)
        reports.append(MetricsReport(group=name, n_images=len(recs),
                                     per_class=per_class, macro=macro,
                                     mde_m=mde_m, empty_count=empty))
    return reports


# -- rendering ----------------------------------------------------------------

def _fmt(v: float | None, digits: int = 6) -> str:
    return "" if v is None else f"{v:.{digits}f}"


def segmentation_csv(reports: list[MetricsReport]) -> str:
    lines = ["group,scope,precision,recall,f1,iou"]
    for rep in reports:
        if rep.per_class is None:
            continue
        for k, m in rep.per_class.items():
            lines.append(f"{rep.group},{ZONE_NAMES.get(k, k)},{_fmt(m.precision)},"
                         f"{_fmt(m.recall)},{_fmt(m.f1)},{_fmt(m.iou)}")
        mm = rep.macro
        lines.append(f"{rep.group},macro,{_fmt(mm.precision)},{_fmt(mm.recall)},"
                     f"{_fmt(mm.f1)},{_fmt(mm.iou)}")
    return "\n".join(lines) + "\n"


def fronts_csv(reports: list[MetricsReport]) -> str:
    lines = ["group,n_images,empty,mde_m"]
    for rep in reports:
        lines.append(f"{rep.group},{rep.n_images},{rep.empty_count},"
                     f"{_fmt(rep.mde_m, 3)}")
    return "\n".join(lines) + "\n"


def format_table(reports: list[MetricsReport]) -> str:
    """Aligned text table: one block per group."""
    out = []
    for rep in reports:
        out.append(f"== {rep.group}  (images: {rep.n_images})")
        mde_txt = "undefined" if rep.mde_m is None else f"{rep.mde_m:.1f} m"
        out.append(f"   MDE: {mde_txt}   no-front predictions: {rep.empty_count}")
        if rep.per_class is not None:
            header = f"   {'scope':<10}{'prec':>9}{'recall':>9}{'f1':>9}{'iou':>9}"
            out.append(header)
            rows = list(rep.per_class.items()) + [("macro", rep.macro)]
            for key, m in rows:
                name = key if isinstance(key, str) else ZONE_NAMES.get(key, str(key))
                vals = "".join(f"{_fmt(getattr(m, a), 4):>9}"
                               for a in ("precision", "recall", "f1", "iou"))
                out.append(f"   {name:<10}{vals}")
    return "\n".join(out) + "\n"
