"""Command line entry point: ``detfuse {fuse,eval,augment,synth,refmath}``.

Exit status is 0 on success, 1 for bad input (parse, validation, usage)
and 2 when an internal invariant fails. Results go to stdout or to files;
diagnostics go to stderr. Every file output is accompanied by a run
manifest recording the resolved configuration and input digests.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .core import InvariantError

log = logging.getLogger("detfuse")


@dataclass
class RunManifest:
    subcommand: str
    config: dict[str, Any]
    inputs: dict[str, str] = field(default_factory=dict)
    version: str = __version__
    seed: int = 0
    started_at: str = ""
    wall_time_s: float = 0.0

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; output does not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="detfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"detfuse {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fuse", help="fuse several detection files with weighted boxes fusion")
    p.add_argument("--inputs", required=True, help="comma-separated detection files (dirs for visdrone)")
    p.add_argument("--format", choices=("coco", "visdrone"), default="coco")
    p.add_argument("--iou", type=float, default=0.55, help="cluster matching IoU")
    p.add_argument("--rescale", choices=("clamped", "none"), default="clamped")
    p.add_argument("--score-floor", type=float, default=0.0)
    p.add_argument("--weights", default=None, help="comma-separated per-input weights")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("eval", help="COCO-protocol mAP of a detection file")
    p.add_argument("--dets", required=True)
    p.add_argument("--gt", required=True, help="COCO annotation file or VisDrone annotation dir")
    p.add_argument("--preset", choices=("coco", "visdrone"), default="coco")
    p.add_argument("--format", choices=("coco", "visdrone"), default=None, help="defaults to the preset")
    p.add_argument("--images", default=None, help="VisDrone image dir, used for frame sizes")
    p.add_argument("--max-dets", type=int, default=None)
    p.add_argument("--name", default="model", help="row label in the printed table")
    p.add_argument("--out", default=None, help="write the machine-readable report here")
    _common(p)

    p = sub.add_parser("augment", help="cut-paste augmentation of a dataset")
    p.add_argument("--dataset", required=True, help="COCO annotation file or VisDrone annotation dir")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("coco", "visdrone"), default=None, help="inferred from --dataset")
    p.add_argument("--per-image", type=int, default=2)
    p.add_argument("--min", type=int, default=11)
    p.add_argument("--max", type=int, default=29)
    p.add_argument("--no-overlap", action="store_true", help="reject placements overlapping existing boxes")
    p.add_argument("--balanced", action="store_true", help="sample categories uniformly")
    p.add_argument("--feather", action="store_true", help="soften mask edges by one pixel")
    _common(p)

    p = sub.add_parser("synth", help="synthetic two-detector experiments")
    ssub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = ssub.add_parser("experiment", help="evaluate both simulated detectors and their fusion")
    q.add_argument("--config", default=None, help="flat key = value experiment file")
    q.add_argument("--trials", type=int, default=None)
    q.add_argument("--out", default=None, help="write the JSON report here")
    _common(q)
    q = ssub.add_parser("generate", help="write one synthetic dataset and both detectors' outputs")
    q.add_argument("--config", default=None)
    q.add_argument("--out", required=True, help="output directory")
    _common(q)

    p = sub.add_parser("refmath", help="reference loss math")
    rsub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = rsub.add_parser("check", help="run the fixture and gradient self-test battery")
    _common(q)
    return parser


def _fuse(args: argparse.Namespace, manifest: RunManifest) -> int:
    from .formats import (
        load_visdrone_detections,
        parse_coco_detections,
        write_coco_detections,
        write_visdrone_detections,
    )
    from .fusion import FusionConfig, ensemble

    paths = [Path(p) for p in args.inputs.split(",") if p]
    weights = None
    if args.weights:
        ws = [float(w) for w in args.weights.split(",")]
        if len(ws) != len(paths):
            raise ValueError("--weights needs one value per input")
        weights = {k: w for k, w in enumerate(ws)}
    cfg = FusionConfig(
        match_iou=args.iou,
        num_models=len(paths),
        rescale_mode="clamped_count" if args.rescale == "clamped" else "none",
        score_floor=args.score_floor,
        model_weights=weights,
    )
    manifest.config.update(asdict(cfg))
    manifest.inputs = {str(p): _digest(p) for p in paths}
    out = Path(args.out)

    if args.format == "coco":
        files = [parse_coco_detections(p.read_bytes(), model=k) for k, p in enumerate(paths)]
        fused = ensemble(files, cfg, model=len(paths), threads=args.threads)
        out.write_text(write_coco_detections(fused))
        manifest_path = out.with_name(out.name + ".manifest.json")
    else:
        stems = sorted({q.stem for p in paths for q in p.glob("*.txt")})
        ids = {s: k for k, s in enumerate(stems, start=1)}
        files = [load_visdrone_detections(p, ids, model=k) for k, p in enumerate(paths)]
        fused = ensemble(files, cfg, model=len(paths), threads=args.threads)
        out.mkdir(parents=True, exist_ok=True)
        per_image = fused.by_image()
        for s, k in ids.items():
            (out / f"{s}.txt").write_text(write_visdrone_detections(per_image.get(k, [])))
        manifest_path = out / "manifest.json"
    log.info("fused %d inputs into %d detections", len(paths), len(fused))
    _finish(manifest, manifest_path)
    return 0


def _load_dataset(path: Path, fmt: str, images: str | None):
    from .formats import load_visdrone_dataset, parse_coco_annotations

    if fmt == "coco":
        return parse_coco_annotations(path.read_bytes())
    return load_visdrone_dataset(path, images)


def _eval(args: argparse.Namespace, manifest: RunManifest) -> int:
    from .evaluation import EvalConfig, evaluate
    from .formats import load_visdrone_detections, parse_coco_detections

    fmt = args.format or args.preset
    cfg = EvalConfig.preset(args.preset)
    if args.max_dets is not None:
        cfg = EvalConfig(cfg.thresholds, args.max_dets)
    gt_path, det_path = Path(args.gt), Path(args.dets)
    ds = _load_dataset(gt_path, fmt, args.images)
    if fmt == "coco":
        dets = parse_coco_detections(det_path.read_bytes())
    else:
        ids = {Path(im.file_name).stem: im.id for im in ds.images}
        dets = load_visdrone_detections(det_path, ids)
    report = evaluate(dets, ds, cfg, threads=args.threads)
    sys.stdout.write(report.format_table(args.name))
    manifest.config.update({"preset": args.preset, "format": fmt, "max_dets": cfg.max_dets,
                            "thresholds": list(cfg.thresholds)})
    manifest.inputs = {str(gt_path): _digest(gt_path), str(det_path): _digest(det_path)}
    if args.out:
        out = Path(args.out)
        out.write_text(report.to_json())
        _finish(manifest, out.with_name(out.name + ".manifest.json"))
    return 0


def _augment(args: argparse.Namespace, manifest: RunManifest) -> int:
    from .augment import AugmentConfig, augment_dataset, load_rasters, save_raster
    from .formats import write_coco_annotations, write_visdrone_ground_truth

    src = Path(args.dataset)
    fmt = args.format or ("visdrone" if src.is_dir() else "coco")
    cfg = AugmentConfig(
        per_source_images=args.per_image,
        min_objects=args.min,
        max_objects=args.max,
        seed=manifest.seed,
        allow_overlap=not args.no_overlap,
        category_balanced=args.balanced,
        feather=args.feather,
    )
    ds = _load_dataset(src, fmt, args.images)
    rasters = load_rasters(ds, args.images)
    out_ds, new_rasters = augment_dataset(ds, rasters, cfg, threads=args.threads)

    out = Path(args.out)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    for im in ds.images:
        if im.id in rasters:
            shutil.copyfile(Path(args.images) / im.file_name, img_dir / im.file_name)
    for im in out_ds.images:
        if im.id in new_rasters:
            save_raster(img_dir / im.file_name, new_rasters[im.id])
    if fmt == "coco":
        (out / "annotations.json").write_text(write_coco_annotations(out_ds))
    else:
        ann_dir = out / "annotations"
        ann_dir.mkdir(exist_ok=True)
        for im in out_ds.images:
            stem = Path(im.file_name).stem
            (ann_dir / f"{stem}.txt").write_text(write_visdrone_ground_truth(out_ds.gts_for(im.id)))
    manifest.config.update(asdict(cfg))
    manifest.config["format"] = fmt
    manifest.inputs = {str(src): _digest(src), args.images: _digest(Path(args.images))}
    log.info("wrote %d augmented images", len(new_rasters))
    _finish(manifest, out / "manifest.json")
    return 0


def _synth_setup(args: argparse.Namespace, manifest: RunManifest):
    from dataclasses import replace

    from .synth import MULTI_STAGE_LIKE, SINGLE_STAGE_LIKE, SceneConfig, parse_config
    from .fusion import FusionConfig

    if args.config:
        path = Path(args.config)
        scene, a, b, fusion, trials = parse_config(path.read_text())
        manifest.inputs = {str(path): _digest(path)}
    else:
        scene, a, b, fusion, trials = SceneConfig(), MULTI_STAGE_LIKE, SINGLE_STAGE_LIKE, FusionConfig(num_models=2), 20
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    manifest.seed = scene.seed
    return scene, a, b, fusion, trials


def _synth(args: argparse.Namespace, manifest: RunManifest) -> int:
    from .formats import write_coco_annotations, write_coco_detections
    from .fusion import ensemble
    from .synth import format_config, generate_scenes, run_ensemble_experiment, simulate_detector

    scene, a, b, fusion, trials = _synth_setup(args, manifest)
    if args.action == "experiment":
        trials = args.trials if args.trials is not None else trials
        manifest.config.update({"resolved": format_config(scene, a, b, fusion, trials)})
        report = run_ensemble_experiment(scene, a, b, fusion, trials, threads=args.threads)
        sys.stdout.write(report.format_table())
        if args.out:
            out = Path(args.out)
            out.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
            _finish(manifest, out.with_name(out.name + ".manifest.json"))
        return 0

    manifest.config.update({"resolved": format_config(scene, a, b, fusion, trials)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_scenes(scene)
    det_a = simulate_detector(ds, a, seed=scene.seed, model=0)
    det_b = simulate_detector(ds, b, seed=scene.seed, model=1)
    (out / "gt.json").write_text(write_coco_annotations(ds))
    (out / "a.json").write_text(write_coco_detections(det_a))
    (out / "b.json").write_text(write_coco_detections(det_b))
    (out / "fused.json").write_text(write_coco_detections(ensemble([det_a, det_b], fusion, model=2, threads=args.threads)))
    _finish(manifest, out / "manifest.json")
    return 0


def _refmath(args: argparse.Namespace, manifest: RunManifest) -> int:
    from .refmath import self_check

    rows = self_check(manifest.seed)
    for name, ok, detail in rows:
        sys.stdout.write(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}\n")
    failed = [r for r in rows if not r[1]]
    if failed:
        log.error("%d of %d refmath checks failed", len(failed), len(rows))
        return 2
    return 0


def _finish(manifest: RunManifest, path: Path) -> None:
    manifest.wall_time_s = round(time.monotonic() - _T0[0], 3)
    manifest.write(path)


_T0 = [0.0]
_HANDLERS = {"fuse": _fuse, "eval": _eval, "augment": _augment, "synth": _synth, "refmath": _refmath}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        sys.stderr.write("detfuse: error: --threads must be >= 1\n")
        return 1
    _T0[0] = time.monotonic()
    seed = args.seed if args.seed is not None else 0
    config = {k: v for k, v in vars(args).items() if k not in ("command", "action", "verbose", "threads")}
    manifest = RunManifest(
        subcommand=" ".join(filter(None, [args.command, getattr(args, "action", None)])),
        config=config,
        seed=seed,
        started_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    try:
        return _HANDLERS[args.command](args, manifest)
    except (InvariantError, AssertionError) as e:
        log.error("internal invariant violated: %s", e)
        return 2
    except (ValueError, OSError) as e:
        sys.stderr.write(f"detfuse: error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
