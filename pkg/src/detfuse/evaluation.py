"""COCO-protocol detection evaluation.

Greedy score-ordered matching at each IoU threshold, cumulative
precision-recall curves, 101-point interpolated AP, and the usual
summaries: mean over IoU thresholds 0.50:0.05:0.95 (``map_c``), and the
class-mean AP at 0.50 and 0.75.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import CategoryTable, GroundTruthBox, ScoredDetection, intersection, iou, parallel_map
from .formats import Dataset, DetectionFile, UnknownReferenceError

__all__ = [
    "COCO_THRESHOLDS",
    "MatchStatus",
    "MatchEntry",
    "MatchResult",
    "EvalConfig",
    "EvalReport",
    "match_detections",
    "pr_curve",
    "pr_curve_from_flags",
    "average_precision",
    "evaluate",
]

COCO_THRESHOLDS: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID: tuple[float, ...] = tuple(i / 100 for i in range(101))


class MatchStatus(enum.Enum):
    TP = "tp"
    FP = "fp"
    IGNORED = "ignored"


@dataclass(frozen=True)
class MatchEntry:
    score: float
    image: int
    order: int
    status: MatchStatus
    gt_index: int | None = None


@dataclass
class MatchResult:
    entries: list[MatchEntry] = field(default_factory=list)

    @property
    def flags(self) -> list[bool]:
        return [e.status is MatchStatus.TP for e in self.entries if e.status is not MatchStatus.IGNORED]


def _overlaps(dets: Sequence[ScoredDetection], gts: Sequence[GroundTruthBox]) -> np.ndarray:
    # Crowd regions are scored by the share of the detection they cover.
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if g.crowd:
                a = d.box.width * d.box.height
                out[i, j] = intersection(d.box, g.box) / a if a > 0 else 0.0
            else:
                out[i, j] = iou(d.box, g.box)
    return out


def _match(
    dets: Sequence[ScoredDetection],
    orders: Sequence[int],
    gts: Sequence[GroundTruthBox],
    overlaps: np.ndarray,
    iou_thresh: float,
) -> MatchResult:
    rank = sorted(range(len(dets)), key=lambda i: (-dets[i].score, orders[i]))
    taken = [False] * len(gts)
    entries = []
    for i in rank:
        d = dets[i]
        best, best_iou = None, -1.0
        for j, g in enumerate(gts):
            if g.crowd or taken[j]:
                continue
            ov = overlaps[i, j]
            if ov >= iou_thresh and ov > best_iou:
                best, best_iou = j, ov
        if best is not None:
            taken[best] = True
            entries.append(MatchEntry(d.score, d.image, orders[i], MatchStatus.TP, best))
            continue
        crowd = next((j for j, g in enumerate(gts) if g.crowd and overlaps[i, j] >= iou_thresh), None)
        status = MatchStatus.IGNORED if crowd is not None else MatchStatus.FP
        entries.append(MatchEntry(d.score, d.image, orders[i], status, crowd))
    return MatchResult(entries)


def match_detections(
    dets: Sequence[ScoredDetection],
    gts: Sequence[GroundTruthBox],
    iou_thresh: float,
    orders: Sequence[int] | None = None,
) -> MatchResult:
    """Match one image's detections of one category against its ground truth.

    A detection is a true positive when an unmatched non-crowd box overlaps
    it with IoU ``>= iou_thresh`` (the highest such IoU wins). Detections
    that fail but land on a crowd region are ignored rather than counted.
    """
    if orders is None:
        orders = range(len(dets))
    return _match(dets, list(orders), gts, _overlaps(dets, gts), iou_thresh)


def pr_curve_from_flags(flags: Sequence[bool], num_gt: int) -> list[tuple[float, float]]:
    """(recall, precision) after each detection in ranked order."""
    if num_gt < 0:
        raise ValueError(f"num_gt must be >= 0, got {num_gt}")
    curve = []
    tp = fp = 0
    for hit in flags:
        if hit:
            tp += 1
        else:
            fp += 1
        recall = tp / num_gt if num_gt else 0.0
        curve.append((recall, tp / (tp + fp)))
    return curve


def pr_curve(matches: Iterable[MatchResult], num_gt: int) -> list[tuple[float, float]]:
    """Pool per-image match results, rank globally and accumulate."""
    entries = [e for m in matches for e in m.entries if e.status is not MatchStatus.IGNORED]
    entries.sort(key=lambda e: (-e.score, e.image, e.order))
    return pr_curve_from_flags([e.status is MatchStatus.TP for e in entries], num_gt)


def average_precision(curve: Sequence[tuple[float, float]]) -> float:
    """101-point interpolated AP over recall levels 0, 0.01, ..., 1."""
    if not curve:
        return 0.0
    recall = np.array([r for r, _ in curve])
    # precision envelope: best precision at any recall at or beyond each point
    envelope = np.maximum.accumulate(np.array([p for _, p in curve])[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    interp = [float(envelope[i]) if i < len(curve) else 0.0 for i in idx]
    return math.fsum(interp) / len(RECALL_GRID)


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple[float, ...] = COCO_THRESHOLDS
    max_dets: int = 100

    @classmethod
    def preset(cls, name: str) -> "EvalConfig":
        if name == "coco":
            return cls(max_dets=100)
        if name == "visdrone":
            return cls(max_dets=500)
        raise ValueError(f"unknown preset {name!r}")


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    categories: CategoryTable
    # AP per threshold for every category that has ground truth
    ap: dict[int, list[float]]
    num_gt: dict[int, int]

    def class_mean(self, threshold: float) -> float:
        k = self._index(threshold)
        if k is None or not self.ap:
            return float("nan")
        return math.fsum(v[k] for v in self.ap.values()) / len(self.ap)

    def _index(self, threshold: float) -> int | None:
        for k, t in enumerate(self.thresholds):
            if abs(t - threshold) < 1e-9:
                return k
        return None

    @property
    def map_c(self) -> float:
        if not self.ap:
            return float("nan")
        means = [math.fsum(v[k] for v in self.ap.values()) / len(self.ap) for k in range(len(self.thresholds))]
        return math.fsum(means) / len(means)

    @property
    def map_50(self) -> float:
        return self.class_mean(0.5)

    @property
    def map_75(self) -> float:
        return self.class_mean(0.75)

    @property
    def per_class_ap50(self) -> dict[int, float]:
        k = self._index(0.5)
        return {c: v[k] for c, v in self.ap.items()} if k is not None else {}

    def to_dict(self) -> dict:
        return {
            "map_c": self.map_c,
            "map_50": self.map_50,
            "map_75": self.map_75,
            "thresholds": list(self.thresholds),
            "per_class": [
                {
                    "id": c,
                    "name": self.categories.name(c),
                    "num_gt": self.num_gt[c],
                    "ap": self.ap[c],
                }
                for c in sorted(self.ap)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def format_table(self, name: str = "model") -> str:
        def pct(v: float) -> str:
            return "   n/a" if math.isnan(v) else f"{100 * v:6.2f}"

        lines = [
            f"{'':16s} {'mAP_C':>6s} {'mAP_50':>6s} {'mAP_75':>6s}",
            f"{name[:16]:16s} {pct(self.map_c)} {pct(self.map_50)} {pct(self.map_75)}",
            "",
            f"{'class (AP@0.50)':16s} {name[:16]:>16s}",
        ]
        for c, v in sorted(self.per_class_ap50.items()):
            lines.append(f"{self.categories.name(c)[:16]:16s} {pct(v):>16s}")
        return "\n".join(lines) + "\n"


def evaluate(
    dets: DetectionFile | Sequence[ScoredDetection],
    ds: Dataset,
    cfg: EvalConfig = EvalConfig(),
    *,
    threads: int = 1,
) -> EvalReport:
    """Score a detection file against a dataset's ground truth.

    At most ``cfg.max_dets`` top-scoring detections per image are kept.
    Categories without ground truth are left out of every mean.
    """
    items = dets.detections if isinstance(dets, DetectionFile) else list(dets)
    image_ids = set(ds.image_ids)
    for d in items:
        if d.image not in image_ids:
            raise UnknownReferenceError("image", d.image)
        if d.category not in ds.categories:
            raise UnknownReferenceError("category", d.category)

    per_image: dict[int, list[int]] = {}
    for k, d in enumerate(items):
        per_image.setdefault(d.image, []).append(k)
    kept: dict[tuple[int, int], list[int]] = {}
    for img in sorted(per_image):
        idx = sorted(per_image[img], key=lambda k: (-items[k].score, k))[: cfg.max_dets]
        for k in sorted(idx):
            kept.setdefault((img, items[k].category), []).append(k)

    gts: dict[tuple[int, int], list[GroundTruthBox]] = {}
    num_gt = {c: 0 for c in ds.categories.ids}
    for g in ds.ground_truth:
        gts.setdefault((g.image, g.category), []).append(g)
        if not g.crowd:
            num_gt[g.category] = num_gt.get(g.category, 0) + 1

    cats = [c for c in ds.categories.ids if num_gt.get(c, 0) > 0]
    cells: dict[int, list[tuple]] = {c: [] for c in cats}
    for key in sorted(set(kept) | set(gts)):
        img, cat = key
        if cat not in cells:
            continue
        d_idx = kept.get(key, [])
        d = [items[k] for k in d_idx]
        g = gts.get(key, [])
        cells[cat].append((d, d_idx, g, _overlaps(d, g)))

    def ap_for(job: tuple[int, float]) -> float:
        cat, thr = job
        results = [_match(d, idx, g, ov, thr) for d, idx, g, ov in cells[cat]]
        return average_precision(pr_curve(results, num_gt[cat]))

    jobs = [(c, t) for c in cats for t in cfg.thresholds]
    values = parallel_map(ap_for, jobs, threads)
    ap: dict[int, list[float]] = {c: [] for c in cats}
    for (c, _), v in zip(jobs, values):
        ap[c].append(v)
    return EvalReport(tuple(cfg.thresholds), ds.categories, ap, {c: num_gt[c] for c in cats})
