"""Synthetic ground truth and detector simulation.

The simulator models the trade-off between a multi-stage detector (misses
more objects but localizes tightly) and a single-stage one (finds nearly
everything, with looser boxes and more spurious hits), so the value of
fusing the two can be measured without trained networks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any

import numpy as np

from .core import VISDRONE_CATEGORIES, BBox, CategoryTable, GroundTruthBox, ScoredDetection, iou, parallel_map
from .evaluation import EvalConfig, evaluate
from .formats import Dataset, DetectionFile, ImageInfo
from .fusion import FusionConfig, ensemble

__all__ = [
    "SceneConfig",
    "DetectorProfile",
    "MULTI_STAGE_LIKE",
    "SINGLE_STAGE_LIKE",
    "generate_scenes",
    "simulate_detector",
    "ExperimentReport",
    "run_ensemble_experiment",
    "parse_config",
]

# Long-tailed class frequencies over the 10 VisDrone classes.
DEFAULT_CATEGORY_WEIGHTS = (0.25, 0.10, 0.04, 0.30, 0.07, 0.04, 0.03, 0.02, 0.03, 0.12)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in key]))


@dataclass(frozen=True)
class SceneConfig:
    num_images: int = 200
    image_width: int = 1024
    image_height: int = 768
    objects_min: int = 5
    objects_max: int = 25
    category_weights: tuple[float, ...] = DEFAULT_CATEGORY_WEIGHTS
    size_min: float = 24.0
    size_max: float = 160.0
    # placements overlapping an earlier box by more than this are redrawn
    max_gt_iou: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        if not 0 <= self.objects_min <= self.objects_max:
            raise ValueError("need 0 <= objects_min <= objects_max")
        w = self.category_weights
        if not w or any(x < 0 for x in w) or sum(w) <= 0:
            raise ValueError(f"category weights must be non-negative with a positive sum, got {w}")
        if not 0 < self.size_min <= self.size_max:
            raise ValueError("need 0 < size_min <= size_max")
        if self.size_max > min(self.image_width, self.image_height):
            raise ValueError("objects larger than the image")
        if not 0.0 < self.max_gt_iou <= 1.0:
            raise ValueError("max_gt_iou must lie in (0, 1]")

    @property
    def probabilities(self) -> np.ndarray:
        w = np.asarray(self.category_weights, dtype=float)
        return w / w.sum()

    def categories(self) -> CategoryTable:
        if len(self.category_weights) == len(VISDRONE_CATEGORIES):
            return VISDRONE_CATEGORIES
        return CategoryTable.from_names([f"class{k}" for k in range(1, len(self.category_weights) + 1)])


@dataclass(frozen=True)
class DetectorProfile:
    miss_rate: float
    jitter_sigma: float
    fp_rate: float
    tp_score_mean: float = 0.8
    tp_score_sigma: float = 0.1
    fp_score_mean: float = 0.3
    fp_score_sigma: float = 0.1
    label_noise: float = 0.0
    fp_size_min: float = 24.0
    fp_size_max: float = 160.0

    def __post_init__(self) -> None:
        for name in ("miss_rate", "label_noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("jitter_sigma", "fp_rate", "tp_score_sigma", "fp_score_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.fp_size_min <= self.fp_size_max:
            raise ValueError("need 0 < fp_size_min <= fp_size_max")


MULTI_STAGE_LIKE = DetectorProfile(miss_rate=0.30, jitter_sigma=1.0, fp_rate=0.5)
SINGLE_STAGE_LIKE = DetectorProfile(miss_rate=0.05, jitter_sigma=6.0, fp_rate=3.0)


_PLACEMENT_TRIES = 50


def _log_uniform(rng: np.random.Generator, lo: float, hi: float, size: Any = None) -> Any:
    return np.exp(rng.uniform(math.log(lo), math.log(hi), size=size))


def generate_scenes(cfg: SceneConfig) -> Dataset:
    """Random axis-aligned ground truth; each image draws from its own seeded stream."""
    table = cfg.categories()
    ids = np.array(table.ids)
    probs = cfg.probabilities
    images, gts = [], []
    for k in range(cfg.num_images):
        image_id = k + 1
        rng = _rng(cfg.seed, image_id)
        images.append(ImageInfo(image_id, float(cfg.image_width), float(cfg.image_height), f"synth_{image_id:06d}"))
        n = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
        cats = rng.choice(ids, size=n, p=probs)
        ws = _log_uniform(rng, cfg.size_min, cfg.size_max, n)
        hs = _log_uniform(rng, cfg.size_min, cfg.size_max, n)
        placed: list[BBox] = []
        for c, w, h in zip(cats, ws, hs):
            for _ in range(_PLACEMENT_TRIES):
                x = rng.uniform(0, 1) * (cfg.image_width - w)
                y = rng.uniform(0, 1) * (cfg.image_height - h)
                box = BBox(float(x), float(y), float(x + w), float(y + h))
                if cfg.max_gt_iou >= 1.0 or all(iou(box, b) <= cfg.max_gt_iou for b in placed):
                    break
            placed.append(box)
            gts.append(GroundTruthBox(box, int(c), image_id))
    return Dataset(images, table, gts)


def _truncated_normal(rng: np.random.Generator, mean: float, sigma: float) -> float:
    if sigma == 0:
        return min(max(mean, 0.0), 1.0)
    for _ in range(100):
        v = rng.normal(mean, sigma)
        if 0.0 <= v <= 1.0:
            return float(v)
    return min(max(mean, 0.0), 1.0)


def _jittered(rng: np.random.Generator, box: BBox, sigma: float, width: float, height: float) -> BBox:
    x0, y0, x1, y1 = np.asarray(box.as_tuple()) + rng.normal(0.0, sigma, 4)
    x0, x1 = sorted((x0, x1))
    y0, y1 = sorted((y0, y1))
    return BBox(float(x0), float(y0), float(x1), float(y1)).clip(width, height)


def simulate_detector(ds: Dataset, prof: DetectorProfile, seed: int = 0, model: int = 0) -> DetectionFile:
    """Draw one detector's output for every image of ``ds``.

    Each ground-truth box is found with probability ``1 - miss_rate`` and
    reported with Gaussian corner noise; on top, a Poisson number of
    spurious boxes lands at random positions.
    """
    cats = ds.categories.ids
    by_image: dict[int, list[GroundTruthBox]] = {}
    for g in ds.ground_truth:
        by_image.setdefault(g.image, []).append(g)
    dets: list[ScoredDetection] = []
    for im in ds.images:
        rng = _rng(seed, model, im.id)
        for g in by_image.get(im.id, []):
            if g.crowd or rng.random() < prof.miss_rate:
                continue
            box = _jittered(rng, g.box, prof.jitter_sigma, im.width, im.height)
            cat = g.category
            if prof.label_noise and rng.random() < prof.label_noise and len(cats) > 1:
                cat = int(rng.choice([c for c in cats if c != g.category]))
            score = _truncated_normal(rng, prof.tp_score_mean, prof.tp_score_sigma)
            dets.append(ScoredDetection(box, score, cat, model, im.id))
        for _ in range(int(rng.poisson(prof.fp_rate))):
            w = float(min(_log_uniform(rng, prof.fp_size_min, prof.fp_size_max), im.width))
            h = float(min(_log_uniform(rng, prof.fp_size_min, prof.fp_size_max), im.height))
            x = float(rng.uniform(0, im.width - w))
            y = float(rng.uniform(0, im.height - h))
            cat = int(rng.choice(cats))
            score = _truncated_normal(rng, prof.fp_score_mean, prof.fp_score_sigma)
            dets.append(ScoredDetection(BBox(x, y, x + w, y + h), score, cat, model, im.id))
    return DetectionFile(dets, model)


@dataclass
class ExperimentReport:
    trials: int
    # metric name -> {"A": [...], "B": [...], "fused": [...]} per-trial values
    per_trial: dict[str, dict[str, list[float]]] = field(default_factory=dict)

    def mean(self, metric: str, who: str) -> float:
        return float(np.mean(self.per_trial[metric][who]))

    def std(self, metric: str, who: str) -> float:
        return float(np.std(self.per_trial[metric][who]))

    def to_dict(self) -> dict:
        summary = {
            metric: {who: {"mean": self.mean(metric, who), "std": self.std(metric, who)} for who in vals}
            for metric, vals in self.per_trial.items()
        }
        return {"trials": self.trials, "summary": summary, "per_trial": self.per_trial}

    def format_table(self) -> str:
        lines = [f"{'':8s} {'mAP_C':>15s} {'mAP_50':>15s} {'mAP_75':>15s}"]
        for who in ("A", "B", "fused"):
            cells = [
                f"{100 * self.mean(m, who):6.2f} ± {100 * self.std(m, who):5.2f}"
                for m in ("map_c", "map_50", "map_75")
            ]
            lines.append(f"{who:8s} " + " ".join(f"{c:>15s}" for c in cells))
        return "\n".join(lines) + "\n"


def run_ensemble_experiment(
    scene_cfg: SceneConfig,
    profile_a: DetectorProfile,
    profile_b: DetectorProfile,
    fusion_cfg: FusionConfig = FusionConfig(num_models=2),
    trials: int = 20,
    *,
    eval_cfg: EvalConfig = EvalConfig(max_dets=500),
    threads: int = 1,
) -> ExperimentReport:
    """Evaluate two simulated detectors and their fusion over independent trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    fusion_cfg = replace(fusion_cfg, num_models=2)

    def one(trial: int) -> dict[str, dict[str, float]]:
        scene_seed = int(_rng(scene_cfg.seed, trial).integers(2**63))
        ds = generate_scenes(replace(scene_cfg, seed=scene_seed))
        a = simulate_detector(ds, profile_a, seed=scene_seed, model=0)
        b = simulate_detector(ds, profile_b, seed=scene_seed, model=1)
        fused = ensemble([a, b], fusion_cfg, model=2)
        out: dict[str, dict[str, float]] = {}
        for who, dets in (("A", a), ("B", b), ("fused", fused)):
            r = evaluate(dets, ds, eval_cfg)
            out[who] = {"map_c": r.map_c, "map_50": r.map_50, "map_75": r.map_75}
        return out

    results = parallel_map(one, range(trials), threads)
    report = ExperimentReport(trials)
    for metric in ("map_c", "map_50", "map_75"):
        report.per_trial[metric] = {who: [r[who][metric] for r in results] for who in ("A", "B", "fused")}
    return report


def _coerce(value: str, like: Any) -> Any:
    if isinstance(like, tuple):
        return tuple(float(v) for v in value.split(",") if v.strip())
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def parse_config(text: str) -> tuple[SceneConfig, DetectorProfile, DetectorProfile, FusionConfig, int]:
    """Read a flat ``key = value`` experiment file.

    Scene keys are bare (``num_images``, ``category_weights``, ...); detector
    keys are prefixed ``a.`` / ``b.``; fusion keys are prefixed ``fusion.``.
    ``trials`` sets the default trial count. Unknown keys are an error.
    """
    scene: dict[str, Any] = {}
    prof: dict[str, dict[str, Any]] = {"a": {}, "b": {}}
    fusion: dict[str, Any] = {}
    trials = 20
    scene_fields = {f.name: f for f in fields(SceneConfig)}
    prof_fields = {f.name for f in fields(DetectorProfile)}
    fusion_fields = {"match_iou", "rescale_mode", "score_floor"}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key == "trials":
                trials = int(value)
            elif key in scene_fields:
                scene[key] = _coerce(value, getattr(SceneConfig(), key))
            elif key[:2] in ("a.", "b.") and key[2:] in prof_fields:
                prof[key[0]][key[2:]] = float(value)
            elif key.startswith("fusion.") and key[7:] in fusion_fields:
                name = key[7:]
                fusion[name] = value if name == "rescale_mode" else float(value)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}") from None
    return (
        SceneConfig(**scene),
        replace(MULTI_STAGE_LIKE, **prof["a"]),
        replace(SINGLE_STAGE_LIKE, **prof["b"]),
        FusionConfig(num_models=2, **fusion),
        trials,
    )


def format_config(scene: SceneConfig, a: DetectorProfile, b: DetectorProfile, fusion: FusionConfig, trials: int) -> str:
    lines = [f"trials = {trials}"]
    for k, v in asdict(scene).items():
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    for prefix, p in (("a", a), ("b", b)):
        lines.extend(f"{prefix}.{k} = {v}" for k, v in asdict(p).items())
    lines += [
        f"fusion.match_iou = {fusion.match_iou}",
        f"fusion.rescale_mode = {fusion.rescale_mode}",
        f"fusion.score_floor = {fusion.score_floor}",
    ]
    return "\n".join(lines) + "\n"
