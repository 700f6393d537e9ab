"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line; the lines are printed together
in the terminal summary (see ``conftest.py``) and, when this file is run
directly with ``python3 tests/test_acceptance.py``, to stdout.
"""

from __future__ import annotations

import random
import time

import numpy as np
import pytest

from detfuse.augment import augment_dataset, save_raster
from detfuse.cli import main
from detfuse.core import BBox, ScoredDetection, area, from_xywh, intersection, iou, meets_quality
from detfuse.evaluation import evaluate
from detfuse.formats import (
    DetectionFile,
    FormatError,
    parse_coco_annotations,
    parse_coco_detections,
    parse_visdrone,
    write_coco_annotations,
    write_coco_detections,
    write_visdrone_detections,
)
from detfuse.fusion import FusionConfig, wbf_fuse
from detfuse.refmath import (
    bbox_reg_loss,
    cascade_stage_loss,
    combined_centernet_loss,
    decode_center,
    encode_decode_error,
    focal_keypoint_loss,
    gradient_checks,
    SizeTarget,
    render_heatmap,
    size_loss,
    smooth_l1,
)
from detfuse.synth import MULTI_STAGE_LIKE, SINGLE_STAGE_LIKE, SceneConfig, run_ensemble_experiment

from conftest import random_detections
from test_cli import SMALL, run_twice
from test_evaluation import dataset, det as eval_det, gt as eval_gt, oracle_agrees
from test_fusion import check_wbf_instance

RESULTS: list[str] = []


def report(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def test_geometry_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    pairs = 10_000
    worst = 0.0
    problems = []
    for _ in range(pairs):
        x = rng.uniform(-500, 500, 4)
        w = rng.uniform(0.5, 200, 4)
        a = BBox(x[0], x[1], x[0] + w[0], x[1] + w[1])
        b = BBox(x[2], x[3], x[2] + w[2], x[3] + w[3])
        # overlap a good share of pairs so the invariance checks are not all zeros
        if rng.random() < 0.5:
            b = a.shifted(*rng.uniform(-w[0], w[0], 2))
        v = iou(a, b)
        if v != iou(b, a) or not 0.0 <= v <= 1.0:
            problems.append(("symmetry/range", a, b))
        dx, dy = rng.uniform(-1000, 1000, 2)
        k = float(np.exp(rng.uniform(-3, 3)))
        worst = max(worst, abs(iou(a.shifted(dx, dy), b.shifted(dx, dy)) - v), abs(iou(a.scaled(k), b.scaled(k)) - v))
    fixtures = [
        area(BBox(0, 0, 2, 3)) == 6,
        intersection(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) == 2,
        abs(iou(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2)) - 1 / 3) <= 1e-9,
        iou(BBox(3, 4, 9, 10), BBox(3, 4, 9, 10)) == 1.0,
        iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0,
        meets_quality(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2), 0.33),
        not meets_quality(BBox(0, 0, 2, 2), BBox(1, 0, 3, 2), 0.34),
        from_xywh(10, 20, 30, 40).as_tuple() == (10, 20, 40, 60),
    ]
    elapsed = time.perf_counter() - t0
    ok = not problems and worst <= 1e-9 and all(fixtures) and elapsed < 5
    report("geometry", ok, f"{pairs} pairs, worst invariance drift {worst:.1e}, "
           f"{sum(fixtures)}/{len(fixtures)} fixtures, {elapsed:.2f}s (< 5s)")


def test_wbf_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    instances = 1000
    failures = 0
    for _ in range(instances):
        n = int(rng.integers(0, 11))
        cfg = FusionConfig(match_iou=float(rng.uniform(0.1, 0.9)), num_models=3, rescale_mode="none")
        try:
            check_wbf_instance(random_detections(rng, n, categories=3), cfg)
        except AssertionError:
            failures += 1
    elapsed = time.perf_counter() - t0
    report("wbf oracle", failures == 0 and elapsed < 10,
           f"{instances - failures}/{instances} instances reconstructed within 1e-9, {elapsed:.2f}s (< 10s)")


def test_wbf_hand_fixtures():
    merged = wbf_fuse(
        [ScoredDetection(BBox(0, 0, 10, 10), 0.9, 0), ScoredDetection(BBox(2, 2, 12, 12), 0.6, 0)],
        FusionConfig(match_iou=0.4, rescale_mode="none"),
    )
    rescaled = wbf_fuse(
        [ScoredDetection(BBox(0, 0, 10, 10), 0.9, 0, 0), ScoredDetection(BBox(50, 50, 60, 60), 0.8, 0, 1)],
        FusionConfig(num_models=2),
    )
    err = max(
        max(abs(a - b) for a, b in zip(merged[0].box.as_tuple(), (0.8, 0.8, 10.8, 10.8))),
        abs(merged[0].score - 0.75),
        abs(rescaled[0].score - 0.45),
        abs(rescaled[1].score - 0.40),
    )
    ok = len(merged) == 1 and len(rescaled) == 2 and err <= 1e-9
    report("wbf fixtures", ok, f"two-box merge and clamped rescale, max error {err:.1e} (<= 1e-9)")


def test_evaluator_oracle():
    t0 = time.perf_counter()
    instances = 500
    agree = sum(oracle_agrees(seed) for seed in range(instances))
    gts = [eval_gt(0, 0, 10, 10), eval_gt(20, 20, 30, 35), eval_gt(5, 5, 9, 9, image=2)]
    perfect = evaluate([eval_det(*g.box.as_tuple(), 1.0, image=g.image) for g in gts], dataset(gts, images=(1, 2)))
    gated = evaluate(
        [eval_det(0, 0, 10, 6, 0.9), eval_det(20, 20, 30, 26, 0.8)],
        dataset([eval_gt(0, 0, 10, 10), eval_gt(20, 20, 30, 30)]),
    )
    elapsed = time.perf_counter() - t0
    ok = (agree == instances and perfect.map_c == 1.0 and gated.map_50 == 1.0 and gated.map_75 == 0.0
          and elapsed < 30)
    report("evaluator oracle", ok,
           f"{agree}/{instances} instances within 1e-9, perfect map_c={perfect.map_c}, "
           f"IoU-0.6 map_50={gated.map_50} map_75={gated.map_75}, {elapsed:.2f}s (< 30s)")


def test_refmath_battery():
    t0 = time.perf_counter()
    worst = gradient_checks(np.random.default_rng(2), points=100)
    roundtrip = encode_decode_error(np.random.default_rng(3), trials=200)
    a, b = BBox(1, 1, 11, 11), BBox(0, 0, 10, 10)
    heat = render_heatmap([((8.0, 8.0), 1.0)], (6, 6), 4)
    fixtures = {
        "smooth_l1(0.5)": (smooth_l1(0.5), 0.125),
        "smooth_l1(-2)": (smooth_l1(-2.0), 1.5),
        "G shifted box": (bbox_reg_loss(a, b), 2.0),
        "focal positive": (focal_keypoint_loss(np.array([[0.5]]), np.array([[1.0]]), 1), 0.1733),
        "focal background": (focal_keypoint_loss(np.array([[0.5]]), np.array([[0.0]]), 1), 0.1733),
        "heatmap neighbor": (heat.at((3, 2)), 0.6065),
        "size loss": (size_loss([(10, 10)], [SizeTarget(1, (8, 12))]), 4.0),
        "stage loss": (cascade_stage_loss(0.5, 1, a, b), 2.6931),
        "combined": (combined_centernet_loss(1.0, 4.0, 0.7), 2.1),
    }
    decoded = decode_center((50, 50), (0.2, 0.3), (10, 20), 1).as_tuple()
    fixture_err = max(
        max(abs(got - want) for got, want in fixtures.values()),
        max(abs(g - w) for g, w in zip(decoded, (45.2, 40.3, 55.2, 60.3))),
    )
    elapsed = time.perf_counter() - t0
    grad_worst = max(worst.values())
    names = {"smooth_l1", "bbox_reg_loss", "focal_keypoint_loss", "offset_loss", "size_loss"}
    ok = (names <= set(worst) and grad_worst < 1e-4 and roundtrip <= 1e-6 and fixture_err <= 1e-4
          and elapsed < 10)
    report("refmath", ok, f"worst gradient rel. error {grad_worst:.1e} (< 1e-4), encode/decode {roundtrip:.1e} px "
           f"(<= 1e-6), fixtures max error {fixture_err:.1e} (<= 1e-4), {elapsed:.2f}s (< 10s)")


def test_synthetic_ensemble_experiment():
    t0 = time.perf_counter()
    scene = SceneConfig(num_images=200)
    r = run_ensemble_experiment(scene, MULTI_STAGE_LIKE, SINGLE_STAGE_LIKE, trials=20, threads=1)
    elapsed = time.perf_counter() - t0
    m50 = {w: r.mean("map_50", w) for w in ("A", "B", "fused")}
    m75 = {w: r.mean("map_75", w) for w in ("A", "B", "fused")}
    margin = m50["fused"] - max(m50["A"], m50["B"])
    ok = (len(scene.category_weights) == 10 and margin >= 0.02 and m75["fused"] >= max(m75["A"], m75["B"])
          and elapsed < 120)
    report("synthetic ensemble", ok,
           f"map_50 A={100 * m50['A']:.2f} B={100 * m50['B']:.2f} fused={100 * m50['fused']:.2f} "
           f"(margin {100 * margin:.2f} >= 2.00); map_75 A={100 * m75['A']:.2f} B={100 * m75['B']:.2f} "
           f"fused={100 * m75['fused']:.2f}; {elapsed:.1f}s (< 120s)")


def test_augmentation_suite(toy_scene):
    t0 = time.perf_counter()
    ds, rasters = toy_scene
    out1, r1 = augment_dataset(ds, rasters, threads=1)
    out2, r2 = augment_dataset(ds, rasters, threads=1)
    out8, r8 = augment_dataset(ds, rasters, threads=8)
    new = [im for im in out1.images if im.id not in set(ds.image_ids)]
    counts = []
    outside_ok = True
    for k, im in enumerate(new):
        src = ds.images[k // 2]
        counts.append(len(out1.gts_for(im.id)) - len(ds.gts_for(src.id)))
        pasted = np.zeros(r1[im.id].shape[:2], dtype=bool)
        for g in out1.gts_for(im.id)[len(ds.gts_for(src.id)):]:
            x0, y0, x1, y1 = (int(v) for v in g.box.as_tuple())
            pasted[y0:y1, x0:x1] = True
        changed = np.any(r1[im.id] != rasters[src.id], axis=2)
        outside_ok &= not changed[~pasted].any()
    identical = (
        out1 == out2 == out8
        and all(r1[k].tobytes() == r2[k].tobytes() == r8[k].tobytes() for k in r1)
    )
    elapsed = time.perf_counter() - t0
    ok = len(new) == 6 and all(11 <= n <= 29 for n in counts) and identical and outside_ok and elapsed < 10
    report("augmentation", ok, f"{len(new)} augmented images, pasted counts {counts}, deterministic={identical}, "
           f"outside-mask pixels unchanged={outside_ok}, {elapsed:.2f}s (< 10s)")


VALID_ANNOTATIONS = (
    b'{"images": [{"id": 1, "width": 100, "height": 80, "file_name": "a.jpg"}],'
    b' "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [10, 20, 30, 40],'
    b' "iscrowd": 0, "segmentation": [[10, 20, 40, 20, 10, 60]]}],'
    b' "categories": [{"id": 3, "name": "car"}]}'
)
VALID_DETECTIONS = b'[{"image_id": 1, "category_id": 4, "bbox": [0.5, 1, 10, 20.25], "score": 0.9}]'
VALID_VISDRONE = b"684,8,273,116,1,4,0,0\n0,0,10,10,1,1,0,0\n"


def mutate(data: bytes, rnd: random.Random) -> bytes:
    b = bytearray(data)
    for _ in range(rnd.randint(1, 4)):
        op = rnd.randrange(5)
        pos = rnd.randrange(len(b) + 1)
        if op == 0 and b:
            b[min(pos, len(b) - 1)] = rnd.randrange(256)
        elif op == 1:
            b[pos:pos] = bytes([rnd.randrange(256)])
        elif op == 2 and b:
            del b[pos : pos + rnd.randint(1, 8)]
        elif op == 3:
            b = b[:pos]
        else:
            chunk = b[pos : pos + rnd.randint(1, 16)]
            b[pos:pos] = chunk * rnd.randint(1, 50)
    return bytes(b)


def test_format_fuzz_and_round_trip():
    rnd = random.Random(4)
    parsers = [
        (VALID_ANNOTATIONS, parse_coco_annotations),
        (VALID_DETECTIONS, parse_coco_detections),
        (VALID_VISDRONE, lambda b: parse_visdrone(b, 1, "gt")),
        (VALID_VISDRONE, lambda b: parse_visdrone(b, 1, "det")),
    ]
    mutations, aborts = 10_000, []
    for i in range(mutations):
        seed_bytes, parse = parsers[i % len(parsers)]
        data = mutate(seed_bytes, rnd)
        try:
            parse(data)
        except FormatError:
            pass
        except Exception as e:  # anything else is an abnormal abort
            aborts.append((data, repr(e)))

    rng = np.random.default_rng(5)
    files, mismatches = 1000, 0
    for _ in range(files):
        dets = []
        for _ in range(int(rng.integers(0, 8))):
            # values on a 1/64 grid survive 6-decimal text exactly
            x, y = rng.integers(-6400, 6400, 2) / 64
            w, h = rng.integers(0, 6400, 2) / 64
            dets.append(ScoredDetection(BBox(x, y, x + w, y + h), int(rng.integers(0, 65)) / 64,
                                        int(rng.integers(1, 11)), 0, int(rng.integers(0, 1000))))
        back = parse_coco_detections(write_coco_detections(DetectionFile(dets))).detections
        vd = [d for d in dets if d.image == (dets[0].image if dets else 0)]
        vd_back = parse_visdrone(write_visdrone_detections(vd), vd[0].image if vd else 0, "det")
        if back != dets or vd_back != vd:
            mismatches += 1
    ok = not aborts and mismatches == 0
    report("format fuzz + round trip", ok,
           f"{mutations} mutations, {len(aborts)} abnormal aborts; {files - mismatches}/{files} round trips exact")


def test_cli_determinism_umbrella(tmp_path, toy_scene, capsys):
    ds, rasters = toy_scene
    img = tmp_path / "images"
    img.mkdir()
    for im in ds.images:
        save_raster(img / im.file_name, rasters[im.id])
    ann = tmp_path / "ann.json"
    ann.write_text(write_coco_annotations(ds))
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(SMALL)

    gen = tmp_path / "gen"
    assert main(["synth", "generate", "--config", str(cfg), "--out", str(gen), "--seed", "3"]) == 0
    commands = {
        "fuse": lambda o: ["fuse", "--inputs", f"{gen / 'a.json'},{gen / 'b.json'}", "--out", str(o / "f.json")],
        "eval": lambda o: ["eval", "--dets", str(gen / "a.json"), "--gt", str(gen / "gt.json"),
                           "--out", str(o / "r.json")],
        "augment": lambda o: ["augment", "--dataset", str(ann), "--images", str(img), "--out", str(o / "aug")],
        "synth generate": lambda o: ["synth", "generate", "--config", str(cfg), "--out", str(o / "g")],
        "synth experiment": lambda o: ["synth", "experiment", "--config", str(cfg), "--out", str(o / "x.json")],
        "refmath check": lambda o: ["refmath", "check"],
    }
    same = {}
    for name, build in commands.items():
        d = tmp_path / name.replace(" ", "_")
        d.mkdir()
        a, b = run_twice(d, build)
        out = capsys.readouterr().out
        halves = out[: len(out) // 2], out[len(out) // 2 :]
        same[name] = a == b and halves[0] == halves[1]
    ok = all(same.values())
    report("cli determinism", ok, ", ".join(f"{k}={'identical' if v else 'DIFFERS'}" for k, v in same.items())
           + " (--threads 1 vs 8)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
