"""Reference implementations of the detector training losses and targets.

Covers the cascade detector's smooth-L1 box regression and per-stage loss,
and the center-point detector's Gaussian keypoint heatmap, focal keypoint
loss, offset and size losses, box decoding and peak picking. Every loss that
is differentiable in its predictions comes with an analytic gradient.

Heatmap grids are indexed ``[y, x]``; grid cells are reported as ``(x, y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import BBox, ContractError

__all__ = [
    "Heatmap",
    "KeypointTarget",
    "SizeTarget",
    "CascadeStageConfig",
    "smooth_l1",
    "smooth_l1_grad",
    "bbox_reg_loss",
    "bbox_reg_loss_grad",
    "regression_loss",
    "cascade_stage_loss",
    "cascade_compose",
    "adaptive_sigma",
    "keypoint_target",
    "encode_box",
    "render_heatmap",
    "focal_keypoint_loss",
    "focal_keypoint_loss_grad",
    "offset_loss",
    "offset_loss_grad",
    "size_loss",
    "size_loss_grad",
    "combined_centernet_loss",
    "decode_center",
    "peak_pick",
    "FOCAL_EPS",
    "central_difference",
    "gradient_checks",
    "self_check",
]

FOCAL_EPS = 1e-12
SIGMA_FLOOR = 0.5


@dataclass(frozen=True)
class Heatmap:
    grid: np.ndarray
    stride: int = 1

    def __post_init__(self) -> None:
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 2:
            raise ValueError(f"heatmap grid must be 2-D, got shape {g.shape}")
        if g.size and (g.min() < 0.0 or g.max() > 1.0):
            raise ValueError("heatmap values must lie in [0, 1]")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def at(self, cell: tuple[int, int]) -> float:
        x, y = cell
        return float(self.grid[y, x])


@dataclass(frozen=True)
class KeypointTarget:
    gt_point: tuple[float, float]
    stride: int
    quantized: tuple[int, int]
    offset: tuple[float, float]
    sigma: float = 1.0


@dataclass(frozen=True)
class SizeTarget:
    category: int
    wh: tuple[float, float]

    def __post_init__(self) -> None:
        if self.wh[0] < 0 or self.wh[1] < 0:
            raise ValueError(f"sizes must be non-negative, got {self.wh}")


@dataclass(frozen=True)
class CascadeStageConfig:
    thresholds: tuple[float, ...]

    def __post_init__(self) -> None:
        q = self.thresholds
        if not q:
            raise ValueError("a cascade needs at least one stage")
        if any(not 0.0 < t < 1.0 for t in q):
            raise ValueError(f"stage thresholds must lie in (0, 1), got {q}")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError(f"stage thresholds must be strictly increasing, got {q}")

    @property
    def num_stages(self) -> int:
        return len(self.thresholds)


# --- cascade detector -------------------------------------------------------


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


def smooth_l1_grad(x: float) -> float:
    if abs(x) < 1.0:
        return x
    return math.copysign(1.0, x)


def _coords(b: BBox | Sequence[float]) -> tuple[float, float, float, float]:
    return tuple(b)  # type: ignore[return-value]


def bbox_reg_loss(pred: BBox | Sequence[float], gt: BBox | Sequence[float]) -> float:
    """Sum of smooth-L1 over the four corner-coordinate differences."""
    return sum(smooth_l1(p - g) for p, g in zip(_coords(pred), _coords(gt)))


def bbox_reg_loss_grad(pred: BBox | Sequence[float], gt: BBox | Sequence[float]) -> np.ndarray:
    """Gradient of :func:`bbox_reg_loss` with respect to the predicted corners."""
    return np.array([smooth_l1_grad(p - g) for p, g in zip(_coords(pred), _coords(gt))])


def regression_loss(preds: Sequence[BBox], gts: Sequence[BBox]) -> float:
    if len(preds) != len(gts):
        raise ContractError(f"{len(preds)} predictions vs {len(gts)} targets")
    return sum(bbox_reg_loss(p, g) for p, g in zip(preds, gts))


def cascade_stage_loss(class_prob: float, label: int, pred: BBox, gt: BBox) -> float:
    """Cross-entropy on the true label plus box regression for foreground labels."""
    if class_prob == 0.0:
        raise ContractError("true-label probability is 0; the classification loss is infinite")
    if not 0.0 < class_prob <= 1.0:
        raise ContractError(f"probability must lie in (0, 1], got {class_prob}")
    loss = -math.log(class_prob)
    if label >= 1:
        loss += bbox_reg_loss(pred, gt)
    return loss


def cascade_compose(regressors: Sequence[Callable[[BBox], BBox]], x: BBox) -> BBox:
    """Apply ``regressors`` in order, each refining the previous output."""
    if not regressors:
        raise ContractError("cascade needs at least one regressor")
    for d in regressors:
        x = d(x)
    return x


# --- center-point detector --------------------------------------------------


def adaptive_sigma(w_grid: float, h_grid: float) -> float:
    """Size-dependent Gaussian spread for a box measured in grid cells."""
    r = (w_grid + h_grid) / 4.0
    return max(SIGMA_FLOOR, r / 3.0)


def keypoint_target(gt_point: tuple[float, float], stride: int, sigma: float = 1.0) -> KeypointTarget:
    x, y = gt_point[0] / stride, gt_point[1] / stride
    qx, qy = math.floor(x), math.floor(y)
    return KeypointTarget((float(gt_point[0]), float(gt_point[1])), stride, (qx, qy), (x - qx, y - qy), sigma)


def encode_box(box: BBox, category: int, stride: int) -> tuple[KeypointTarget, SizeTarget]:
    """Center keypoint and grid-unit size targets for one box."""
    cx, cy = (box.x_tl + box.x_br) / 2.0, (box.y_tl + box.y_br) / 2.0
    w, h = box.width / stride, box.height / stride
    return keypoint_target((cx, cy), stride, adaptive_sigma(w, h)), SizeTarget(category, (w, h))


def render_heatmap(
    objects: Sequence[tuple[tuple[float, float], float]],
    grid_shape: tuple[int, int],
    stride: int,
) -> Heatmap:
    """Splat one Gaussian per object around its quantized center cell.

    ``objects`` holds ``(gt_point, sigma)`` pairs with points in input pixels.
    Overlapping Gaussians combine by element-wise maximum.
    """
    h, w = grid_shape
    grid = np.zeros((h, w))
    ys, xs = np.mgrid[0:h, 0:w]
    for point, sigma in objects:
        if sigma <= 0:
            raise ContractError(f"sigma must be positive, got {sigma}")
        qx, qy = math.floor(point[0] / stride), math.floor(point[1] / stride)
        g = np.exp(-((xs - qx) ** 2 + (ys - qy) ** 2) / (2.0 * sigma * sigma))
        np.maximum(grid, g, out=grid)
    return Heatmap(grid, stride)


def _grids(pred: Heatmap | np.ndarray, gt: Heatmap | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = pred.grid if isinstance(pred, Heatmap) else np.asarray(pred, dtype=float)
    g = gt.grid if isinstance(gt, Heatmap) else np.asarray(gt, dtype=float)
    if p.shape != g.shape:
        raise ContractError(f"prediction shape {p.shape} != target shape {g.shape}")
    return p, g


def focal_keypoint_loss(pred: Heatmap | np.ndarray, gt: Heatmap | np.ndarray, num_keypoints: int) -> float:
    """Penalty-reduced pixel-wise focal loss over a keypoint heatmap.

    Predictions are clamped to ``[FOCAL_EPS, 1 - FOCAL_EPS]`` before taking
    logs; cells where the prediction already equals a hard 0/1 target add 0.
    """
    if num_keypoints < 1:
        raise ContractError(f"keypoint count must be >= 1, got {num_keypoints}")
    p, g = _grids(pred, gt)
    pos = g == 1.0
    pc = np.clip(p, FOCAL_EPS, 1.0 - FOCAL_EPS)
    pos_term = (1.0 - pc) ** 2 * np.log(pc)
    neg_term = (1.0 - g) ** 4 * pc**2 * np.log1p(-pc)
    pos_term[pos & (p == 1.0)] = 0.0
    neg_term[~pos & (p == 0.0)] = 0.0
    total = np.where(pos, pos_term, neg_term).sum()
    return float(-total / num_keypoints)


def focal_keypoint_loss_grad(pred: Heatmap | np.ndarray, gt: Heatmap | np.ndarray, num_keypoints: int) -> np.ndarray:
    """Gradient of :func:`focal_keypoint_loss` w.r.t. each predicted cell (zero where clamped)."""
    p, g = _grids(pred, gt)
    pos = g == 1.0
    pc = np.clip(p, FOCAL_EPS, 1.0 - FOCAL_EPS)
    d_pos = -2.0 * (1.0 - pc) * np.log(pc) + (1.0 - pc) ** 2 / pc
    d_neg = (1.0 - g) ** 4 * (2.0 * pc * np.log1p(-pc) - pc**2 / (1.0 - pc))
    grad = -np.where(pos, d_pos, d_neg) / num_keypoints
    grad[(p < FOCAL_EPS) | (p > 1.0 - FOCAL_EPS)] = 0.0
    return grad


def _check_aligned(a: Sequence, b: Sequence, k: int | None = None) -> int:
    if len(a) != len(b):
        raise ContractError(f"{len(a)} predictions vs {len(b)} targets")
    if k is not None and k != len(a):
        raise ContractError(f"keypoint count {k} does not match list length {len(a)}")
    if len(a) == 0:
        raise ContractError("loss needs at least one target")
    return len(a)


def _offset_residuals(pred_offsets: Sequence[tuple[float, float]], targets: Sequence[KeypointTarget]) -> np.ndarray:
    res = []
    for o, t in zip(pred_offsets, targets):
        res.append([
            o[0] + t.quantized[0] - t.gt_point[0] / t.stride,
            o[1] + t.quantized[1] - t.gt_point[1] / t.stride,
        ])
    return np.array(res, dtype=float)


def offset_loss(pred_offsets: Sequence[tuple[float, float]], targets: Sequence[KeypointTarget], num_keypoints: int | None = None) -> float:
    """Mean L1 discretization error of the predicted sub-cell offsets."""
    k = _check_aligned(pred_offsets, targets, num_keypoints)
    return float(np.abs(_offset_residuals(pred_offsets, targets)).sum() / k)


def offset_loss_grad(pred_offsets: Sequence[tuple[float, float]], targets: Sequence[KeypointTarget], num_keypoints: int | None = None) -> np.ndarray:
    k = _check_aligned(pred_offsets, targets, num_keypoints)
    return np.sign(_offset_residuals(pred_offsets, targets)) / k


def size_loss(pred_wh: Sequence[tuple[float, float]], targets: Sequence[SizeTarget]) -> float:
    n = _check_aligned(pred_wh, targets)
    diff = np.asarray(pred_wh, dtype=float) - np.array([t.wh for t in targets], dtype=float)
    return float(np.abs(diff).sum() / n)


def size_loss_grad(pred_wh: Sequence[tuple[float, float]], targets: Sequence[SizeTarget]) -> np.ndarray:
    n = _check_aligned(pred_wh, targets)
    diff = np.asarray(pred_wh, dtype=float) - np.array([t.wh for t in targets], dtype=float)
    return np.sign(diff) / n


def combined_centernet_loss(
    keypoint: float, size: float, offset: float, size_weight: float = 0.1, offset_weight: float = 1.0
) -> float:
    return keypoint + size_weight * size + offset_weight * offset


def decode_center(
    point: tuple[float, float], offset: tuple[float, float], wh: tuple[float, float], stride: int
) -> BBox:
    """Box around a heatmap peak, mapped back to input pixels."""
    w, h = wh
    if w < 0 or h < 0:
        raise ContractError(f"sizes must be non-negative, got {wh}")
    cx, cy = point[0] + offset[0], point[1] + offset[1]
    return BBox(
        (cx - w / 2.0) * stride,
        (cy - h / 2.0) * stride,
        (cx + w / 2.0) * stride,
        (cy + h / 2.0) * stride,
    )


def peak_pick(h: Heatmap | np.ndarray, k: int, window: int = 3, floor: float = 0.0) -> list[tuple[tuple[int, int], float]]:
    """Top-``k`` cells that strictly dominate their ``window`` x ``window`` neighborhood.

    Only values above ``floor`` qualify, so an all-zero map yields no peaks.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if window < 1 or window % 2 == 0:
        raise ContractError(f"window must be a positive odd integer, got {window}")
    grid = h.grid if isinstance(h, Heatmap) else np.asarray(h, dtype=float)
    r = window // 2
    padded = np.pad(grid, r, mode="constant", constant_values=-np.inf)
    rows, cols = grid.shape
    is_peak = grid > floor
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dx == 0 and dy == 0:
                continue
            neigh = padded[r + dy : r + dy + rows, r + dx : r + dx + cols]
            is_peak &= grid > neigh
    ys, xs = np.nonzero(is_peak)
    peaks = [((int(x), int(y)), float(grid[y, x])) for y, x in zip(ys, xs)]
    # row-major scan order settles ties deterministically
    peaks.sort(key=lambda p: -p[1])
    return peaks[:k]


# --- self-test battery ------------------------------------------------------


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += step
        lo[idx] -= step
        grad[idx] = (f(hi) - f(lo)) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` over the whole gradient."""
    a, b = np.ravel(np.asarray(a, dtype=float)), np.ravel(np.asarray(b, dtype=float))
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def _away_from(values: np.ndarray, kinks: Sequence[float], margin: float) -> bool:
    return all(np.all(np.abs(values - k) > margin) for k in kinks)


def gradient_checks(rng: np.random.Generator, points: int = 100, step: float = 1e-5) -> dict[str, float]:
    """Worst relative error between analytic and central-difference gradients per loss."""
    worst: dict[str, float] = {}

    def record(name: str, err: float) -> None:
        worst[name] = max(worst.get(name, 0.0), err)

    done = 0
    while done < points:
        x = rng.uniform(-4.0, 4.0)
        if not _away_from(np.array([x]), [-1.0, 1.0], 1e-3):
            continue
        num = central_difference(lambda v: smooth_l1(float(v[0])), np.array([x]), step)
        record("smooth_l1", relative_error([smooth_l1_grad(x)], num))
        done += 1

    done = 0
    while done < points:
        gt = rng.uniform(0, 50, size=4)
        pred = gt + rng.uniform(-3, 3, size=4)
        if not _away_from(pred - gt, [-1.0, 1.0], 1e-3):
            continue
        num = central_difference(lambda v: bbox_reg_loss(v, gt), pred, step)
        record("bbox_reg_loss", relative_error(bbox_reg_loss_grad(pred, gt), num))
        done += 1

    for _ in range(points):
        shape = (int(rng.integers(2, 6)), int(rng.integers(2, 6)))
        gt = rng.uniform(0.0, 0.99, size=shape)
        gt.flat[int(rng.integers(gt.size))] = 1.0
        pred = rng.uniform(0.02, 0.98, size=shape)
        k = int(rng.integers(1, 4))
        num = central_difference(lambda v: focal_keypoint_loss(v, gt, k), pred, step)
        record("focal_keypoint_loss", relative_error(focal_keypoint_loss_grad(pred, gt, k), num))

    done = 0
    while done < points:
        n = int(rng.integers(1, 5))
        stride = int(rng.integers(1, 9))
        targets = [keypoint_target(tuple(rng.uniform(0, 200, size=2)), stride) for _ in range(n)]
        pred = rng.uniform(0, 1, size=(n, 2))
        res = _offset_residuals(pred, targets)
        if not _away_from(res, [0.0], 1e-3):
            continue
        f = lambda v: offset_loss([tuple(r) for r in v], targets)  # noqa: E731
        num = central_difference(f, pred, step)
        record("offset_loss", relative_error(offset_loss_grad(pred, targets), num))
        done += 1

    done = 0
    while done < points:
        n = int(rng.integers(1, 5))
        targets = [SizeTarget(0, tuple(rng.uniform(0, 30, size=2))) for _ in range(n)]
        pred = rng.uniform(0, 30, size=(n, 2))
        if not _away_from(pred - np.array([t.wh for t in targets]), [0.0], 1e-3):
            continue
        f = lambda v: size_loss([tuple(r) for r in v], targets)  # noqa: E731
        num = central_difference(f, pred, step)
        record("size_loss", relative_error(size_loss_grad(pred, targets), num))
        done += 1
    return worst


def encode_decode_error(rng: np.random.Generator, trials: int = 100) -> float:
    """Worst pixel error of render -> peak -> decode round trips on random boxes."""
    worst = 0.0
    for _ in range(trials):
        stride = int(rng.choice([1, 2, 4, 8]))
        w, h = 2 * stride * int(rng.integers(1, 8)), 2 * stride * int(rng.integers(1, 8))
        x0 = stride * int(rng.integers(0, 20))
        y0 = stride * int(rng.integers(0, 20))
        box = BBox(x0, y0, x0 + w, y0 + h)
        kp, size = encode_box(box, 0, stride)
        shape = (int((y0 + h) // stride) + 4, int((x0 + w) // stride) + 4)
        heat = render_heatmap([(kp.gt_point, kp.sigma)], shape, stride)
        (cell, score), = peak_pick(heat, 1)
        if cell != kp.quantized or score != 1.0:
            return math.inf
        out = decode_center(cell, kp.offset, size.wh, stride)
        worst = max(worst, max(abs(a - b) for a, b in zip(out, box)))
    return worst


def self_check(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Fixture and gradient battery; returns ``(name, passed, detail)`` rows."""
    rows: list[tuple[str, bool, str]] = []

    def near(name: str, got: float, want: float, tol: float = 1e-4) -> None:
        rows.append((name, abs(got - want) <= tol, f"got {got:.6g}, want {want:.6g}"))

    near("smooth_l1(0.5)", smooth_l1(0.5), 0.125)
    near("smooth_l1(-2)", smooth_l1(-2.0), 1.5)
    near("bbox_reg_loss shift 1", bbox_reg_loss(BBox(1, 1, 11, 11), BBox(0, 0, 10, 10)), 2.0)
    near("cascade_stage_loss fg", cascade_stage_loss(0.5, 1, BBox(1, 1, 11, 11), BBox(0, 0, 10, 10)), 2.6931)
    heat = render_heatmap([((8.0, 8.0), 1.0)], (5, 5), 4)
    near("heatmap neighbor", heat.at((3, 2)), 0.6065)
    near("focal positive cell", focal_keypoint_loss(np.array([[0.5]]), np.array([[1.0]]), 1), 0.1733)
    near("size_loss", size_loss([(10.0, 10.0)], [SizeTarget(0, (8.0, 12.0))]), 4.0)
    box = decode_center((50, 50), (0.2, 0.3), (10, 20), 1)
    err = max(abs(a - b) for a, b in zip(box, (45.2, 40.3, 55.2, 60.3)))
    rows.append(("decode_center", err <= 1e-4, f"max error {err:.3g}"))

    rng = np.random.default_rng(seed)
    for name, e in gradient_checks(rng).items():
        rows.append((f"gradient {name}", e < 1e-4, f"worst relative error {e:.3g}"))
    e = encode_decode_error(rng)
    rows.append(("encode/decode identity", e <= 1e-6, f"worst error {e:.3g} px"))
    return rows
