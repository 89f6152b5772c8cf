"""Segmentation metrics and their class-aware (gated) variants.

Base metrics take a prediction map in [0, 1] and a binary ground truth of the
same shape. The class-aware versions replace a sample's score by the worst
possible value whenever its predicted class is wrong.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .backbone import InvalidInputError

EPS = np.finfo(np.float64).eps
METRIC_ORDER = ("sm", "wfm", "mae", "fm", "em", "iou")
METRIC_LABELS = {
    "sm": "cS_m",
    "wfm": "cF_beta^w",
    "mae": "cMAE",
    "fm": "cF_beta",
    "em": "cE_m",
    "iou": "cIoU",
}
ASCENDING = {"sm", "wfm", "fm", "em", "iou"}


def _prepare(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt.astype(bool)


def adaptive_binarize(pred: np.ndarray) -> np.ndarray:
    """Threshold at min(2 * mean, 1); an all-zero map stays empty."""
    th = min(2.0 * pred.mean(), 1.0)
    return (pred >= th) & (pred > 0)


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.abs(pred - gt).mean())


def iou(pred, gt, threshold: float = 0.5) -> float:
    pred, gt = _prepare(pred, gt)
    b = pred >= threshold
    union = np.count_nonzero(b | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(b & gt) / union


def f_beta(pred, gt, beta_sq: float = 0.3) -> float:
    pred, gt = _prepare(pred, gt)
    b = adaptive_binarize(pred)
    tp = np.count_nonzero(b & gt)
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(b)
    recall = tp / np.count_nonzero(gt)
    return (1 + beta_sq) * precision * recall / (beta_sq * precision + recall)


def matlab_gaussian(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def nearest_foreground(gt: np.ndarray):
    """Distance from every pixel to the closest foreground pixel and the flat
    index of that pixel; ties go to the lowest raster index."""
    h, w = gt.shape
    fg = np.flatnonzero(gt)
    coords = np.stack(np.unravel_index(fg, gt.shape), axis=1).astype(np.float64)
    grid = np.stack(np.unravel_index(np.arange(h * w), gt.shape), axis=1).astype(np.float64)
    tree = cKDTree(coords)
    k = min(len(fg), 16)
    dist, idx = tree.query(grid, k=k)
    if k == 1:
        dist, idx = dist[:, None], idx[:, None]
    dmin = dist[:, 0]
    tol = 1e-9 * np.maximum(dmin, 1.0)
    tied = dist <= (dmin + tol)[:, None]
    nearest = np.where(tied, fg[idx], np.iinfo(np.int64).max).min(axis=1)
    # All k neighbours tied: there may be more equidistant points beyond k.
    for p in np.flatnonzero(tied.all(axis=1)) if k < len(fg) else ():
        ball = tree.query_ball_point(grid[p], dmin[p] + tol[p])
        nearest[p] = fg[ball].min()
    return dmin.reshape(h, w), nearest.reshape(h, w)


def f_beta_weighted(pred, gt, beta_sq: float = 1.0) -> float:
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return 1.0 if not (pred >= 0.5).any() else 0.0
    err = np.abs(pred - gt)
    dist, nearest = nearest_foreground(gt)
    et = err.copy()
    et[~gt] = err.ravel()[nearest[~gt]]
    ea = ndimage.convolve(et, matlab_gaussian(7, 5.0), mode="constant", cval=0.0)
    min_e_ea = err.copy()
    sel = gt & (ea < err)
    min_e_ea[sel] = ea[sel]
    b = np.ones_like(err)
    b[~gt] = 2 - np.exp(np.log(0.5) / 5 * dist[~gt])
    ew = min_e_ea * b
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1 - ew[gt].mean()
    precision = tpw / (tpw + fpw + EPS)
    q = (1 + beta_sq) * recall * precision / (recall + beta_sq * precision + EPS)
    return float(np.clip(q, 0.0, 1.0))


def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sigma + EPS)


def _ssim_block(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    sx = ((pred - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((gt - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((pred - x) * (gt - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def _centroid(gt: np.ndarray):
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(gt)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1 - pred.mean())
    if y == 1:
        return float(pred.mean())
    fg_score = _object_score(pred[gt])
    bg_score = _object_score(1 - pred[~gt])
    s_object = y * fg_score + (1 - y) * bg_score

    g = gt.astype(np.float64)
    cx, cy = _centroid(gt)
    h, w = gt.shape
    area = h * w
    blocks = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    s_region = 0.0
    for rows, cols in blocks:
        block_gt = g[rows, cols]
        weight = block_gt.size / area
        if weight:
            s_region += weight * _ssim_block(pred[rows, cols], block_gt)
    return float(np.clip(alpha * s_object + (1 - alpha) * s_region, 0.0, 1.0))


def e_measure(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    b = adaptive_binarize(pred).astype(np.float64)
    g = gt.astype(np.float64)
    if g.sum() == 0:
        enhanced = 1 - b
    elif g.sum() == g.size:
        enhanced = b
    else:
        dp = b - b.mean()
        dg = g - g.mean()
        align = 2 * dp * dg / (dp * dp + dg * dg + EPS)
        enhanced = (1 + align) ** 2 / 4
    return float(enhanced.mean())


BASE_METRICS = {
    "sm": s_measure,
    "wfm": f_beta_weighted,
    "mae": mae,
    "fm": f_beta,
    "em": e_measure,
    "iou": iou,
}


def base_metrics(pred, gt) -> Dict[str, float]:
    return {k: float(fn(pred, gt)) for k, fn in BASE_METRICS.items()}


def gated(sample_metric: float, class_correct: bool, kind: str = "ascending") -> float:
    if class_correct:
        return sample_metric
    return 1.0 if kind == "mae" else 0.0


@dataclass
class GroundTruth:
    image_id: str
    mask: np.ndarray
    class_index: int


@dataclass
class MetricReport:
    per_sample: List[dict]
    aggregate: Dict[str, float]
    samples: int
    correct: int
    degenerate: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.samples

    def table_row(self, name: str = "") -> str:
        cells = [f"{self.aggregate[k]:.3f}" for k in METRIC_ORDER]
        head = [name] if name else []
        return "\t".join(head + cells)

    @staticmethod
    def table_header() -> str:
        return "\t".join(METRIC_LABELS[k] for k in METRIC_ORDER)

    def to_json(self, path) -> None:
        payload = {
            "samples": self.samples,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "degenerate": self.degenerate,
            "aggregate": self.aggregate,
            "per_sample": self.per_sample,
            "meta": self.meta,
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for k in METRIC_ORDER:
                writer.writerow([METRIC_LABELS[k], repr(self.aggregate[k])])
            writer.writerow(["accuracy", repr(self.accuracy)])


def evaluate(predictions: Sequence, gts: Sequence[GroundTruth]) -> MetricReport:
    """Per-sample base metrics, gated by class correctness, averaged."""
    if not predictions:
        raise InvalidInputError("nothing to evaluate")
    pred_ids = [p.image_id for p in predictions]
    gt_ids = [g.image_id for g in gts]
    if pred_ids != gt_ids:
        bad = sorted(set(pred_ids) ^ set(gt_ids)) or [
            a for a, b in zip(pred_ids, gt_ids) if a != b
        ]
        raise InvalidInputError(f"prediction/ground-truth ids do not align: {bad}")
    per_sample = []
    for p, g in zip(predictions, gts):
        base = base_metrics(p.seg_prob, g.mask)
        correct = int(p.class_index) == int(g.class_index)
        gate = {k: gated(v, correct, "mae" if k == "mae" else "ascending") for k, v in base.items()}
        per_sample.append(
            {
                "image_id": g.image_id,
                "class_correct": correct,
                "predicted_class": int(p.class_index),
                "true_class": int(g.class_index),
                "degenerate": bool(getattr(p, "degenerate", False)),
                "base": base,
                "gated": gate,
            }
        )
    n = len(per_sample)
    aggregate = {k: math.fsum(r["gated"][k] for r in per_sample) / n for k in METRIC_ORDER}
    correct = sum(r["class_correct"] for r in per_sample)
    degenerate = sum(r["degenerate"] for r in per_sample)
    return MetricReport(per_sample, aggregate, n, correct, degenerate)


def relative_gain(row: Dict[str, float], baseline: Dict[str, float]) -> float:
    """Mean signed relative improvement over the six metrics (MAE sign-flipped).

    Undefined (NaN) when any baseline metric is zero.
    """
    gains = []
    for k in METRIC_ORDER:
        if baseline[k] == 0:
            return float("nan")
        rel = (row[k] - baseline[k]) / baseline[k]
        gains.append(-rel if k == "mae" else rel)
    return float(np.mean(gains))
