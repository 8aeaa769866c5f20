"""Salient-object-detection metrics: MAE, F-measure, S-measure, E-measure, weighted F."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ShapeError, dump_json

_EPS = np.spacing(1)
METRIC_NAMES = ("mae", "f_beta", "s_alpha", "e_s", "f_beta_w")


def _prepare(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def adaptive_binary(pred: np.ndarray) -> np.ndarray:
    """``pred >= min(2 mean, 1)``, with an all-zero map staying empty."""
    thr = min(2.0 * pred.mean(), 1.0)
    return (pred >= thr) & (pred > 0)


def mae(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    return float(np.abs(pred - gt).mean())


def _f_from_binary(binary, gt, beta2):
    tp = np.count_nonzero(binary & gt)
    if tp == 0:
        return 0.0
    precision = tp / np.count_nonzero(binary)
    recall = tp / np.count_nonzero(gt)
    return float((1 + beta2) * precision * recall / (beta2 * precision + recall))


def f_measure(pred, gt, beta2: float = 0.3, policy: str = "adaptive") -> float:
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return float(1.0 - pred.mean())
    if policy == "adaptive":
        return _f_from_binary(adaptive_binary(pred), gt, beta2)
    if policy == "max_over_thresholds":
        levels = np.rint(pred * 255)
        return max(_f_from_binary(levels >= t, gt, beta2) for t in range(1, 256))
    raise ValueError(f"unknown F-measure policy {policy!r}")


# --- S-measure ----------------------------------------------------------------

def _s_object_part(values: np.ndarray) -> float:
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return 2 * x / (x * x + 1 + sigma + _EPS)


def _ssim(pred, gt) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    denom = max(n - 1, 1)
    # constant regions get exactly zero spread; a rounded mean would leave ~1e-33 and
    # flip the beta == 0 branch below
    dx = np.zeros_like(pred) if pred.min() == pred.max() else pred - x
    dy = np.zeros_like(gt) if gt.min() == gt.max() else gt - y
    sx = (dx ** 2).sum() / denom
    sy = (dy ** 2).sum() / denom
    sxy = (dx * dy).sum() / denom
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + _EPS)
    return 1.0 if beta == 0 else 0.0


def _centroid(gt):
    h, w = gt.shape
    if not gt.any():
        return int(np.round(w / 2)), int(np.round(h / 2))
    ys, xs = np.nonzero(gt)
    return int(np.round(xs.mean())) + 1, int(np.round(ys.mean())) + 1


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prepare(pred, gt)
    y = gt.mean()
    if y == 0:
        return float(1.0 - pred.mean())
    if y == 1:
        return float(pred.mean())
    gtf = gt.astype(np.float64)
    fg = pred * gtf
    bg = (1 - pred) * (1 - gtf)
    s_obj = y * _s_object_part(fg[gt]) + (1 - y) * _s_object_part(bg[~gt])

    h, w = gt.shape
    cx, cy = _centroid(gt)
    area = h * w
    weights = (cx * cy / area, (w - cx) * cy / area, cx * (h - cy) / area)
    weights += (1 - sum(weights),)
    quads = [(slice(0, cy), slice(0, cx)), (slice(0, cy), slice(cx, w)),
             (slice(cy, h), slice(0, cx)), (slice(cy, h), slice(cx, w))]
    s_reg = sum(wt * _ssim(pred[q], gtf[q]) for wt, q in zip(weights, quads))
    return float(max(0.0, alpha * s_obj + (1 - alpha) * s_reg))


# --- E-measure ----------------------------------------------------------------

def e_measure(pred, gt) -> float:
    pred, gt = _prepare(pred, gt)
    binary = adaptive_binary(pred).astype(np.float64)
    if not gt.any():
        return float(1.0 - binary.mean())
    if gt.all():
        return float(binary.mean())
    gtf = gt.astype(np.float64)
    phi_p = binary - binary.mean()
    phi_g = gtf - gtf.mean()
    align = 2 * phi_g * phi_p / (phi_g ** 2 + phi_p ** 2 + _EPS)
    return float((((1 + align) ** 2) / 4).mean())


# --- weighted F-measure -------------------------------------------------------

def gaussian_kernel(size: int = 7, sigma: float = 5.0) -> np.ndarray:
    r = (size - 1) / 2
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    k = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    k[k < np.finfo(k.dtype).eps * k.max()] = 0
    return k / k.sum()


def nearest_foreground(gt: np.ndarray):
    """Distance to, and flat index of, the nearest foreground pixel (ties: lowest index)."""
    h, w = gt.shape
    fg = np.flatnonzero(gt)
    yy, xx = np.divmod(np.arange(h * w), w)
    fy, fx = yy[fg], xx[fg]
    dist = np.empty(h * w)
    idx = np.empty(h * w, dtype=np.int64)
    for start in range(0, h * w, 512):
        stop = min(start + 512, h * w)
        d2 = (yy[start:stop, None] - fy[None]) ** 2 + (xx[start:stop, None] - fx[None]) ** 2
        j = d2.argmin(axis=1)
        idx[start:stop] = fg[j]
        dist[start:stop] = np.sqrt(d2[np.arange(stop - start), j])
    return dist.reshape(h, w), idx.reshape(h, w)


def weighted_f_measure(pred, gt, beta2: float = 1.0) -> float:
    pred, gt = _prepare(pred, gt)
    if not gt.any():
        return 0.0
    if max(gt.shape) > 128:
        raise ValueError("weighted F-measure is limited to maps of at most 128x128")
    dist, nearest = nearest_foreground(gt)
    err = np.abs(pred - gt)
    err_t = err.ravel()[nearest]  # background pixels take their nearest foreground error
    err_t[gt] = err[gt]
    smoothed = ndimage.convolve(err_t, gaussian_kernel(), mode="constant", cval=0.0)
    min_e = np.where(gt & (smoothed < err), smoothed, err)
    importance = np.where(gt, 1.0, 2.0 - np.exp(np.log(0.5) / 5 * dist))
    ew = min_e * importance
    tpw = gt.sum() - ew[gt].sum()
    fpw = ew[~gt].sum()
    recall = 1 - ew[gt].mean()
    precision = tpw / (tpw + fpw + _EPS)
    return float((1 + beta2) * recall * precision / (recall + beta2 * precision + _EPS))


# --- aggregation --------------------------------------------------------------

@dataclass
class MetricsReport:
    per_image: list = field(default_factory=list)
    mean: dict = field(default_factory=dict)
    dataset: str = "synthetic"
    threshold_policy: str = "adaptive"

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "threshold_policy": self.threshold_policy,
                "mean": self.mean, "per_image": self.per_image}

    def save_json(self, path) -> None:
        dump_json(path, self.to_dict())

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=("index",) + METRIC_NAMES)
            writer.writeheader()
            for i, row in enumerate(self.per_image):
                writer.writerow({"index": i, **row})


def image_metrics(pred, gt, policy: str = "adaptive") -> dict:
    return {
        "mae": mae(pred, gt),
        "f_beta": f_measure(pred, gt, policy=policy),
        "s_alpha": s_measure(pred, gt),
        "e_s": e_measure(pred, gt),
        "f_beta_w": weighted_f_measure(pred, gt),
    }


def evaluate(preds, gts, dataset: str = "synthetic", policy: str = "adaptive") -> MetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground-truth masks")
    if not preds:
        raise ValueError("nothing to evaluate")
    rows = [image_metrics(p, g, policy) for p, g in zip(preds, gts)]
    means = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    return MetricsReport(per_image=rows, mean=means, dataset=dataset, threshold_policy=policy)
