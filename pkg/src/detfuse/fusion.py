"""Weighted boxes fusion plus the NMS and soft-NMS baselines.

WBF walks the detections of one image in descending score order. Each box
joins the first same-category cluster whose running fused box overlaps it
by more than ``match_iou``; otherwise it starts a new cluster. A cluster's
fused score is the mean of its member scores and each fused coordinate is
the score-weighted mean of the members' coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

from .core import BBox, ContractError, ScoredDetection, iou, parallel_map
from .formats import DetectionFile

__all__ = [
    "FusionConfig",
    "FusionCluster",
    "wbf_clusters",
    "wbf_fuse",
    "nms",
    "soft_nms",
    "ensemble",
]

RescaleMode = Literal["none", "clamped_count"]


@dataclass(frozen=True)
class FusionConfig:
    match_iou: float = 0.55
    num_models: int = 1
    rescale_mode: RescaleMode = "clamped_count"
    score_floor: float = 0.0
    # Optional per-model weights; absent models weigh 1.
    model_weights: Mapping[int, float] | None = None

    def __post_init__(self) -> None:
        if not 0.0 < self.match_iou < 1.0:
            raise ContractError(f"match_iou must lie in (0, 1), got {self.match_iou}")
        if self.num_models < 1:
            raise ContractError(f"num_models must be >= 1, got {self.num_models}")
        if self.rescale_mode not in ("none", "clamped_count"):
            raise ContractError(f"unknown rescale_mode {self.rescale_mode!r}")
        if not 0.0 <= self.score_floor < 1.0:
            raise ContractError(f"score_floor must lie in [0, 1), got {self.score_floor}")
        if self.model_weights and any(w <= 0 for w in self.model_weights.values()):
            raise ContractError("model weights must be positive")

    def weight(self, model: int) -> float:
        if not self.model_weights:
            return 1.0
        return float(self.model_weights.get(model, 1.0))


@dataclass
class FusionCluster:
    category: int
    members: list[ScoredDetection] = field(default_factory=list)
    weights: list[float] = field(default_factory=list)
    fused: ScoredDetection | None = None

    def add(self, det: ScoredDetection, weight: float = 1.0) -> None:
        if det.category != self.category:
            raise ContractError(
                f"detection category {det.category} does not match cluster {self.category}"
            )
        self.members.append(det)
        self.weights.append(weight)
        self.fused = _fuse_members(self.members, self.weights)


def _fuse_members(members: Sequence[ScoredDetection], weights: Sequence[float]) -> ScoredDetection:
    wsum = sum(weights)
    score = sum(w * m.score for w, m in zip(weights, members)) / wsum
    coord_w = [w * m.score for w, m in zip(weights, members)]
    total = sum(coord_w)
    if total <= 0.0:
        # all-zero scores leave the score weighting undefined; fall back to plain weights
        coord_w, total = list(weights), wsum
    coords = [
        sum(cw * c for cw, c in zip(coord_w, (m.box.as_tuple()[k] for m in members))) / total
        for k in range(4)
    ]
    # Weighted means of valid boxes are valid up to rounding.
    x0, y0, x1, y1 = coords
    box = BBox(x0, y0, max(x1, x0), max(y1, y0))
    head = members[0]
    return ScoredDetection(box, min(max(score, 0.0), 1.0), head.category, head.model, head.image)


def _check_single_image(dets: Sequence[ScoredDetection]) -> None:
    images = {d.image for d in dets}
    if len(images) > 1:
        raise ContractError(f"detections span several images: {sorted(images)}")


def _score_order(dets: Sequence[ScoredDetection]) -> list[ScoredDetection]:
    idx = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].model, i))
    return [dets[i] for i in idx]


def wbf_clusters(dets: Sequence[ScoredDetection], cfg: FusionConfig) -> list[FusionCluster]:
    """Greedy clustering step of WBF, before rescaling and filtering."""
    _check_single_image(dets)
    clusters: list[FusionCluster] = []
    by_category: dict[int, list[FusionCluster]] = {}
    for det in _score_order(dets):
        pool = by_category.setdefault(det.category, [])
        for cl in pool:
            if iou(cl.fused.box, det.box) > cfg.match_iou:
                cl.add(det, cfg.weight(det.model))
                break
        else:
            cl = FusionCluster(det.category)
            cl.add(det, cfg.weight(det.model))
            pool.append(cl)
            clusters.append(cl)
    return clusters


def _rescaled(cl: FusionCluster, cfg: FusionConfig) -> ScoredDetection:
    f = cl.fused
    if cfg.rescale_mode == "none":
        return f
    n, m = len(cl.members), cfg.num_models
    return ScoredDetection(f.box, f.score * min(n, m) / m, f.category, f.model, f.image)


def wbf_fuse(dets: Sequence[ScoredDetection], cfg: FusionConfig) -> list[ScoredDetection]:
    """Fuse the detections of a single image; returns boxes by descending score."""
    out = [_rescaled(cl, cfg) for cl in wbf_clusters(dets, cfg)]
    out = [d for d in out if d.score >= cfg.score_floor]
    out.sort(key=lambda d: -d.score)
    return out


def nms(dets: Sequence[ScoredDetection], iou_thresh: float) -> list[ScoredDetection]:
    """Greedy per-category NMS; drops boxes overlapping a kept box by ``>= iou_thresh``."""
    _check_single_image(dets)
    kept: list[ScoredDetection] = []
    for det in _score_order(dets):
        if all(k.category != det.category or iou(k.box, det.box) < iou_thresh for k in kept):
            kept.append(det)
    return kept


def soft_nms(
    dets: Sequence[ScoredDetection],
    iou_thresh: float = 0.3,
    mode: Literal["linear", "gaussian"] = "linear",
    sigma: float = 0.5,
    score_floor: float = 0.001,
) -> list[ScoredDetection]:
    """Soft-NMS: decay, rather than remove, boxes overlapping a selected one.

    Linear mode multiplies by ``1 - IoU`` when IoU exceeds ``iou_thresh``;
    gaussian mode multiplies every overlapping box by ``exp(-IoU**2 / sigma)``.
    """
    if mode not in ("linear", "gaussian"):
        raise ContractError(f"unknown soft-NMS mode {mode!r}")
    if mode == "gaussian" and sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    _check_single_image(dets)
    out: list[ScoredDetection] = []
    by_category: dict[int, list[ScoredDetection]] = {}
    for d in _score_order(dets):
        by_category.setdefault(d.category, []).append(d)
    for cat in sorted(by_category):
        pending = [(d, d.score) for d in by_category[cat]]
        while pending:
            best = max(range(len(pending)), key=lambda i: pending[i][1])
            top, top_score = pending.pop(best)
            if top_score < score_floor:
                break
            out.append(ScoredDetection(top.box, top_score, top.category, top.model, top.image))
            decayed = []
            for d, s in pending:
                ov = iou(top.box, d.box)
                if mode == "linear":
                    factor = 1.0 - ov if ov > iou_thresh else 1.0
                else:
                    factor = math.exp(-(ov * ov) / sigma)
                decayed.append((d, s * factor))
            pending = decayed
    out.sort(key=lambda d: -d.score)
    return out


def ensemble(
    det_files: Sequence[DetectionFile],
    cfg: FusionConfig,
    *,
    model: int | None = None,
    threads: int = 1,
) -> DetectionFile:
    """Concatenate several models' detections per image and fuse them."""
    if not det_files:
        raise ContractError("ensemble needs at least one detection file")
    if cfg.num_models != len(det_files):
        raise ContractError(
            f"num_models is {cfg.num_models} but {len(det_files)} detection files were given"
        )
    if model is None:
        model = max(f.model for f in det_files) + 1
    per_image: dict[int, list[ScoredDetection]] = {}
    for f in det_files:
        for d in f.detections:
            per_image.setdefault(d.image, []).append(d)
    images = sorted(per_image)
    fused = parallel_map(lambda i: wbf_fuse(per_image[i], cfg), images, threads)
    out = [
        ScoredDetection(d.box, d.score, d.category, model, d.image)
        for group in fused
        for d in group
    ]
    return DetectionFile(out, model)
