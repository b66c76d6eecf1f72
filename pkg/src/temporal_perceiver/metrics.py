"""Boundary detection metrics: f1 at relative-distance thresholds, mAP with an
absolute tolerance, AP over Gaussian-reconstructed dense scores, and M_iou."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

REL_THRESHOLDS = tuple(round(0.05 * k, 2) for k in range(1, 11))
_SLACK = 1e-12


def _greedy_hits(order: np.ndarray, preds: np.ndarray, gts: np.ndarray, tol: float) -> np.ndarray:
    """Visit predictions in ``order``; each claims the nearest unconsumed
    ground truth within ``tol`` (earliest on ties). Returns hit flags in visit order."""
    free = np.ones(len(gts), dtype=bool)
    hits = np.zeros(len(order), dtype=bool)
    for k, i in enumerate(order):
        if not free.any():
            break
        dist = np.where(free, np.abs(gts - preds[i]), np.inf)
        j = int(np.argmin(dist))
        if dist[j] <= tol + _SLACK:
            free[j] = False
            hits[k] = True
    return hits


def f1_at_rel_dis(preds, gts, rel: float, duration: float) -> tuple[float, float, float]:
    """(precision, recall, f1) where a hit is |t - gt| / duration <= rel."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    preds = np.sort(np.asarray(preds, dtype=np.float64))
    gts = np.sort(np.asarray(gts, dtype=np.float64))
    hits = int(_greedy_hits(np.arange(len(preds)), preds, gts, rel * duration).sum())
    precision = hits / len(preds) if len(preds) else 0.0
    recall = hits / len(gts) if len(gts) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def avg_f1(preds, gts, duration: float) -> float:
    return float(np.mean([f1_at_rel_dis(preds, gts, r, duration)[2] for r in REL_THRESHOLDS]))


def _interpolated_ap(tp: np.ndarray, n_pos: int) -> float:
    """All-point interpolated area under the PR curve for ranked hit flags."""
    if n_pos == 0 or len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    tp_cum = np.cumsum(tp)
    precision = tp_cum / np.arange(1, len(tp) + 1)
    recall = tp_cum / n_pos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    step = np.diff(np.concatenate([[0.0], recall]))
    return float((step * envelope).sum())


def map_at_tolerance(times, scores, gts, delta: float) -> float:
    """Single-class AP: predictions ranked by score, true positive when within
    ``delta`` frames of an unconsumed ground truth."""
    times = np.asarray(times, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    gts = np.sort(np.asarray(gts, dtype=np.float64))
    order = np.argsort(-scores, kind="stable")
    return _interpolated_ap(_greedy_hits(order, times, gts, delta), len(gts))


def dense_from_sparse(times, scores, sigma: float, n_total: int) -> np.ndarray:
    """d_i = max over predictions of p * exp(-(i - t)^2 / (2 sigma^2))."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        return np.zeros(n_total)
    frames = np.arange(n_total, dtype=np.float64)[:, None]
    bumps = np.asarray(scores, dtype=np.float64)[None, :] * np.exp(-((frames - times[None, :]) ** 2) / (2 * sigma**2))
    return bumps.max(axis=1)


def ap_gaussian(times, scores, gts, sigma_ap: float, n_total: int) -> float:
    """AP of Gaussian-reconstructed dense scores against per-frame labels.
    No predictions gives 0 by convention."""
    if sigma_ap <= 0:
        raise ValueError("sigma_ap must be positive")
    if len(times) == 0:
        return 0.0
    labels = np.zeros(n_total, dtype=bool)
    gt_frames = np.clip(np.round(np.asarray(gts, dtype=np.float64)).astype(int), 0, n_total - 1)
    labels[gt_frames] = True
    dense = dense_from_sparse(times, scores, sigma_ap, n_total)
    order = np.argsort(-dense, kind="stable")
    return _interpolated_ap(labels[order], int(labels.sum()))


def _segments(boundaries, n_total: float) -> np.ndarray:
    b = np.unique(np.asarray(boundaries, dtype=np.float64))
    b = b[(b > 0) & (b < n_total)]
    edges = np.concatenate([[0.0], b, [float(n_total)]])
    return np.stack([edges[:-1], edges[1:]], axis=1)


def m_iou(preds, gts, n_total: float) -> float:
    """Symmetric mean of best segment IoU between the segmentations induced
    by two boundary sets."""
    a = _segments(preds, n_total)
    b = _segments(gts, n_total)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    iou = inter / union
    return float(0.5 * (iou.max(axis=0).mean() + iou.max(axis=1).mean()))


@dataclass
class MetricsReport:
    f1: dict[float, float] = field(default_factory=dict)
    avg_f1: float = 0.0
    precision: float = 0.0  # at rel 0.05
    recall: float = 0.0
    map: float = 0.0
    ap: float = 0.0
    miou: float = 0.0

    def as_dict(self) -> dict[str, float]:
        out = {f"f1@{r:.2f}": v for r, v in self.f1.items()}
        out["avg_f1"] = self.avg_f1
        out["precision@0.05"] = self.precision
        out["recall@0.05"] = self.recall
        out["map"] = self.map
        out["ap"] = self.ap
        out["miou"] = self.miou
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for k, v in self.as_dict().items():
            writer.writerow([k, repr(float(v))])
        return buf.getvalue()

    def to_kv(self) -> str:
        return "".join(f"{k}={float(v)!r}\n" for k, v in self.as_dict().items())


def evaluate_video(times, scores, gts, duration: int, delta: float = 1.0, sigma_ap: float | None = None) -> MetricsReport:
    sigma_ap = delta / 2.0 if sigma_ap is None else sigma_ap
    f1 = {r: f1_at_rel_dis(times, gts, r, duration)[2] for r in REL_THRESHOLDS}
    precision, recall, _ = f1_at_rel_dis(times, gts, REL_THRESHOLDS[0], duration)
    return MetricsReport(
        f1=f1,
        avg_f1=float(np.mean(list(f1.values()))),
        precision=precision,
        recall=recall,
        map=map_at_tolerance(times, scores, gts, delta),
        ap=ap_gaussian(times, scores, gts, sigma_ap, duration),
        miou=m_iou(times, gts, duration),
    )


def mean_report(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("no reports to average")
    f1 = {r: float(np.mean([rep.f1[r] for rep in reports])) for r in REL_THRESHOLDS}
    return MetricsReport(
        f1=f1,
        avg_f1=float(np.mean(list(f1.values()))),
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        map=float(np.mean([r.map for r in reports])),
        ap=float(np.mean([r.ap for r in reports])),
        miou=float(np.mean([r.miou for r in reports])),
    )
