import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detfuse.core import BBox, CategoryTable, GroundTruthBox, ScoredDetection
from detfuse.evaluation import (
    COCO_THRESHOLDS,
    EvalConfig,
    MatchStatus,
    average_precision,
    evaluate,
    match_detections,
    pr_curve_from_flags,
)
from detfuse.formats import Dataset, ImageInfo, UnknownReferenceError


def gt(x0, y0, x1, y1, cat=1, image=1, crowd=False):
    return GroundTruthBox(BBox(x0, y0, x1, y1), cat, image, crowd)


def det(x0, y0, x1, y1, s, cat=1, image=1):
    return ScoredDetection(BBox(x0, y0, x1, y1), s, cat, 0, image)


def dataset(gts, images=(1,), cats=("a",)):
    return Dataset(
        [ImageInfo(i, 100.0, 100.0, f"{i}.png") for i in images],
        CategoryTable.from_names(list(cats)),
        list(gts),
    )


# --- independent brute-force oracle -----------------------------------------


def oracle_iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return min(inter / union, 1.0) if union > 0 else 0.0


def oracle_flags(dets, gts, thr):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], dets[i][1], i))
    used = set()
    flags = []
    for i in order:
        s, img, box = dets[i]
        cands = [
            (oracle_iou(box, g[1]), j) for j, g in enumerate(gts)
            if g[0] == img and j not in used and oracle_iou(box, g[1]) >= thr
        ]
        if cands:
            best = max(cands, key=lambda c: (c[0], -c[1]))
            used.add(best[1])
            flags.append(True)
        else:
            flags.append(False)
    return flags, used


def oracle_matched(dets, gts, thr):
    return oracle_flags(dets, gts, thr)[1]


def oracle_ap(dets, gts, thr):
    """dets: (score, image, box); gts: (image, box). Enumerates every prefix."""
    n = len(gts)
    if n == 0:
        return None
    flags, _ = oracle_flags(dets, gts, thr)
    points = []
    for k in range(1, len(flags) + 1):
        tp = sum(flags[:k])
        points.append((tp / n, tp / k))
    total = 0.0
    for i in range(101):
        r = i / 100
        total += max((p for rc, p in points if rc >= r), default=0.0)
    return total / 101


def random_instance(rng):
    images = int(rng.integers(1, 5))
    gts, dets = [], []
    for _ in range(int(rng.integers(1, 5))):
        img = int(rng.integers(1, images + 1))
        x, y = rng.uniform(0, 20, 2)
        w, h = rng.uniform(2, 10, 2)
        gts.append((img, (x, y, x + w, y + h)))
    for _ in range(int(rng.integers(0, 7))):
        if gts and rng.random() < 0.7:
            img, b = gts[int(rng.integers(len(gts)))]
            j = rng.normal(0, 1.5, 4)
            x0, y0 = b[0] + j[0], b[1] + j[1]
            box = (x0, y0, max(x0 + 0.5, b[2] + j[2]), max(y0 + 0.5, b[3] + j[3]))
        else:
            img = int(rng.integers(1, images + 1))
            x, y = rng.uniform(0, 20, 2)
            box = (x, y, x + rng.uniform(1, 8), y + rng.uniform(1, 8))
        dets.append((float(rng.uniform(0.01, 1)), img, tuple(float(v) for v in box)))
    return images, gts, dets


def run_evaluator(images, gts, dets):
    ds = dataset([gt(*b, image=i) for i, b in gts], images=range(1, images + 1))
    ds_dets = [det(*b, s, image=i) for s, i, b in dets]
    return evaluate(ds_dets, ds)


def oracle_agrees(seed):
    images, gts, dets = random_instance(np.random.default_rng(seed))
    report = run_evaluator(images, gts, dets)
    for k, t in enumerate(COCO_THRESHOLDS):
        want = oracle_ap(dets, gts, t)
        if abs(report.ap[1][k] - want) > 1e-9:
            return False
    return True


# --- matching ---------------------------------------------------------------


class TestMatch:
    def test_single_tp(self):
        (e,) = match_detections([det(0, 0, 10, 6, 0.9)], [gt(0, 0, 10, 10)], 0.5).entries
        assert e.status is MatchStatus.TP and e.gt_index == 0

    def test_duplicate_is_fp(self):
        r = match_detections([det(0, 0, 10, 10, 0.6), det(0, 0, 10, 10, 0.9)], [gt(0, 0, 10, 10)], 0.5)
        assert [(e.score, e.status) for e in r.entries] == [(0.9, MatchStatus.TP), (0.6, MatchStatus.FP)]

    def test_boundary_is_inclusive(self):
        (e,) = match_detections([det(0, 0, 10, 5, 0.9)], [gt(0, 0, 10, 10)], 0.5).entries
        assert e.status is MatchStatus.TP

    def test_highest_iou_wins(self):
        gts = [gt(0, 0, 10, 10), gt(1, 0, 11, 10)]
        (e,) = match_detections([det(1, 0, 11, 10, 0.9)], gts, 0.5).entries
        assert e.gt_index == 1

    def test_crowd_absorbs(self):
        r = match_detections([det(0, 0, 10, 10, 0.9), det(50, 50, 55, 55, 0.8)], [gt(40, 40, 90, 90, crowd=True)], 0.5)
        assert [e.status for e in r.entries] == [MatchStatus.FP, MatchStatus.IGNORED]
        assert r.flags == [False]


class TestCurves:
    def test_tp_then_fp(self):
        c = pr_curve_from_flags([True, False], 1)
        assert c == [(1.0, 1.0), (1.0, 0.5)]
        assert average_precision(c) == 1.0

    def test_fp_then_tp(self):
        c = pr_curve_from_flags([False, True], 1)
        assert c == [(0.0, 0.0), (1.0, 0.5)]
        assert average_precision(c) == pytest.approx(0.5, abs=1e-12)

    def test_empty(self):
        assert pr_curve_from_flags([], 3) == []
        assert average_precision([]) == 0.0


class TestEvaluate:
    def test_perfect(self):
        gts = [gt(0, 0, 10, 10), gt(20, 20, 30, 35), gt(5, 5, 9, 9, image=2)]
        ds = dataset(gts, images=(1, 2))
        r = evaluate([det(*g.box.as_tuple(), 1.0, image=g.image) for g in gts], ds)
        assert r.map_c == 1.0 and r.map_50 == 1.0 and r.map_75 == 1.0

    def test_iou_point_six_gating(self):
        gts = [gt(0, 0, 10, 10), gt(20, 20, 30, 30)]
        dets = [det(0, 0, 10, 6, 0.9), det(20, 20, 30, 26, 0.8)]
        r = evaluate(dets, dataset(gts))
        assert r.map_50 == 1.0
        assert r.map_75 == 0.0

    def test_two_class_table(self):
        gts = [gt(0, 0, 10, 10, cat=1), gt(0, 0, 10, 10, cat=2)]
        dets = [det(50, 50, 60, 60, 0.9, cat=1), det(0, 0, 10, 10, 0.8, cat=1), det(0, 0, 10, 10, 0.7, cat=2)]
        r = evaluate(dets, dataset(gts, cats=("a", "b")))
        assert r.per_class_ap50 == pytest.approx({1: 0.5, 2: 1.0}, abs=1e-12)
        assert r.map_50 == pytest.approx(0.75, abs=1e-12)
        for cat, (want,) in ((1, [0.5]), (2, [1.0])):
            d = [(s.score, s.image, s.box.as_tuple()) for s in dets if s.category == cat]
            g = [(x.image, x.box.as_tuple()) for x in gts if x.category == cat]
            assert oracle_ap(d, g, 0.5) == pytest.approx(want, abs=1e-12)

    def test_classes_without_gt_excluded(self):
        r = evaluate([det(0, 0, 10, 10, 0.9, cat=2)], dataset([gt(0, 0, 10, 10)], cats=("a", "b")))
        assert set(r.ap) == {1}
        assert r.map_50 == 0.0

    def test_no_gt_at_all(self):
        r = evaluate([], dataset([]))
        assert math.isnan(r.map_c)

    def test_unknown_references(self):
        ds = dataset([gt(0, 0, 10, 10)])
        with pytest.raises(UnknownReferenceError):
            evaluate([det(0, 0, 1, 1, 0.5, image=9)], ds)
        with pytest.raises(UnknownReferenceError):
            evaluate([det(0, 0, 1, 1, 0.5, cat=9)], ds)

    def test_max_dets(self):
        gts = [gt(0, 0, 10, 10)]
        dets = [det(50, 50, 60, 60, 0.9), det(0, 0, 10, 10, 0.5)]
        assert evaluate(dets, dataset(gts), EvalConfig(max_dets=1)).map_50 == 0.0
        assert evaluate(dets, dataset(gts), EvalConfig(max_dets=2)).map_50 == pytest.approx(0.5)

    def test_presets(self):
        assert EvalConfig.preset("coco").max_dets == 100
        assert EvalConfig.preset("visdrone").max_dets == 500
        with pytest.raises(ValueError):
            EvalConfig.preset("voc")

    def test_map_c_is_mean_of_threshold_means(self):
        images, gts, dets = random_instance(np.random.default_rng(11))
        r = run_evaluator(images, gts, dets)
        assert r.map_c == pytest.approx(sum(r.class_mean(t) for t in COCO_THRESHOLDS) / 10, abs=1e-12)

    def test_threads_bit_identical(self):
        images, gts, dets = random_instance(np.random.default_rng(12))
        ds = dataset([gt(*b, image=i) for i, b in gts], images=range(1, images + 1))
        d = [det(*b, s, image=i) for s, i, b in dets]
        assert evaluate(d, ds, threads=1).to_json() == evaluate(d, ds, threads=8).to_json()

    def test_table_lists_classes(self):
        r = evaluate([], dataset([gt(0, 0, 1, 1)]))
        assert "mAP_C" in r.format_table("x") and "a" in r.format_table("x")


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_oracle_equivalence(seed):
    assert oracle_agrees(seed)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_threshold_monotone(seed):
    r = run_evaluator(*random_instance(np.random.default_rng(seed)))
    aps = r.ap[1]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))
    assert all(0.0 <= a <= 1.0 for a in aps)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 0.25, 0.125]))
def test_score_scale_invariance(seed, k):
    images, gts, dets = random_instance(np.random.default_rng(seed))
    scaled = [(s * k, i, b) for s, i, b in dets]
    assert run_evaluator(images, gts, dets).to_dict() == run_evaluator(images, gts, scaled).to_dict()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ap_monotone_under_added_detections(seed):
    images, gts, dets = random_instance(np.random.default_rng(seed))
    base = run_evaluator(images, gts, dets).ap[1][0]
    # a lowest-ranked detection far from every box is a pure FP
    worse = run_evaluator(images, gts, dets + [(0.001, 1, (500.0, 500.0, 501.0, 501.0))]).ap[1][0]
    assert worse <= base + 1e-12
    # a top-scored copy of a never-matched gt is a new TP that displaces nobody
    used = oracle_matched(dets, gts, 0.5)
    free = [g for j, g in enumerate(gts) if j not in used]
    if free:
        img, box = free[0]
        better = run_evaluator(images, gts, dets + [(1.0, img, box)]).ap[1][0]
        assert better >= base - 1e-12
