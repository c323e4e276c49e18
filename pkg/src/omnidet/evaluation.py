"""COCO-style average precision over IoU 0.40-0.75 and bootstrap comparison."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .geometry import Box, Detection, iou

IOU_THRESHOLDS = tuple(round(0.40 + 0.05 * k, 2) for k in range(8))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _match_image(dets: Sequence[Detection], gts: Sequence[Box], thr: float) -> list[bool]:
    """Greedy per-image matching in descending score; each GT matched at most once."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(gts)
    tp = [False] * len(dets)
    for i in order:
        best, best_j = min(thr, 1 - 1e-10), -1
        for j, g in enumerate(gts):
            if used[j]:
                continue
            ov = iou(dets[i].box, g)
            if ov >= best:
                best, best_j = ov, j
        if best_j >= 0:
            used[best_j] = True
            tp[i] = True
    return tp


def average_precision(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]],
                      iou_threshold: float) -> float:
    """101-point interpolated AP of a pooled single-class ranking.

    Returns 0 when there are no ground-truth boxes at all.
    """
    if len(dets) != len(gts):
        raise ValueError("need one detection list per ground-truth list")
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return 0.0
    scores, flags = [], []
    for d, g in zip(dets, gts):
        ranked = sorted(d, key=lambda x: -x.score)
        scores += [x.score for x in ranked]
        flags += _match_image(ranked, g, iou_threshold)
    if not scores:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    tp = np.asarray(flags, dtype=float)[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(float).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    # tolerance so that e.g. 3/10 reaches the 0.30 recall point despite float spacing
    idx = np.searchsorted(recall, RECALL_POINTS - 1e-12, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


@dataclass
class EvalResult:
    ap: dict[float, float]
    per_image: list[tuple[list[Detection], list[Box]]] = field(default_factory=list, repr=False)

    @property
    def mAP(self) -> float:
        return float(np.mean([self.ap[t] for t in IOU_THRESHOLDS]))

    @property
    def ap50(self) -> float:
        return self.ap[0.5]

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "AP50": self.ap50, "AP": {f"{t:.2f}": v for t, v in self.ap.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        head = " ".join(f"AP{int(round(t * 100))}" for t in IOU_THRESHOLDS)
        vals = " ".join(f"{100 * self.ap[t]:4.1f}" for t in IOU_THRESHOLDS)
        return f"mAP {100 * self.mAP:5.2f}  AP50 {100 * self.ap50:5.2f}\n{head}\n{vals}"


def map_metric(dets: Sequence[Sequence[Detection]], gts: Sequence[Sequence[Box]]) -> EvalResult:
    ap = {t: average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
    return EvalResult(ap, [(list(d), list(g)) for d, g in zip(dets, gts)])


def pr_curve(dets, gts, iou_threshold: float) -> dict:
    """Raw precision/recall along the pooled ranking, for plotting."""
    n_gt = sum(len(g) for g in gts)
    scores, flags = [], []
    for d, g in zip(dets, gts):
        ranked = sorted(d, key=lambda x: -x.score)
        scores += [x.score for x in ranked]
        flags += _match_image(ranked, g, iou_threshold)
    order = np.argsort(-np.asarray(scores, dtype=float), kind="mergesort")
    tp = np.asarray(flags, dtype=float)[order]
    tp_cum = np.cumsum(tp)
    return {
        "iou_threshold": iou_threshold,
        "scores": np.asarray(scores, dtype=float)[order].tolist(),
        "recall": (tp_cum / max(n_gt, 1)).tolist(),
        "precision": (tp_cum / np.arange(1, len(tp) + 1)).tolist(),
    }


def map_of_records(records: Sequence[tuple[Sequence[Detection], Sequence[Box]]]) -> float:
    """mAP of a (possibly resampled) sequence of per-image ``(detections, gts)`` records."""
    return map_metric([r[0] for r in records], [r[1] for r in records]).mAP


@dataclass
class BootstrapResult:
    p_value: float
    t_statistic: float
    mean_a: float
    mean_b: float
    aggregates_a: np.ndarray = field(repr=False)
    aggregates_b: np.ndarray = field(repr=False)


def bootstrap_compare(scores_a: Sequence, scores_b: Sequence, n: int = 1000, seed: int = 0,
                      statistic: Optional[Callable] = None) -> BootstrapResult:
    """Paired bootstrap of an aggregate metric, then a paired t-test over the resamples.

    ``scores_a``/``scores_b`` are aligned per-image entries: numbers (aggregated
    by their mean) or ``(detections, gts)`` records (aggregated by mAP). Both
    methods share every resampled index set.
    """
    if len(scores_a) != len(scores_b):
        raise ValueError("both methods must be scored on the same images")
    m = len(scores_a)
    if m == 0:
        raise ValueError("nothing to resample")
    if statistic is None:
        numeric = not isinstance(scores_a[0], (tuple, list)) and np.ndim(scores_a[0]) == 0
        statistic = (lambda xs: float(np.mean(xs))) if numeric else map_of_records
    arr_a = np.asarray(scores_a, dtype=float) if statistic is not map_of_records else None
    rng = np.random.default_rng(seed)
    agg_a = np.empty(n)
    agg_b = np.empty(n)
    for k in range(n):
        idx = rng.integers(0, m, size=m)
        if arr_a is not None:
            agg_a[k] = statistic(arr_a[idx])
            agg_b[k] = statistic(np.asarray(scores_b, dtype=float)[idx])
        else:
            agg_a[k] = statistic([scores_a[i] for i in idx])
            agg_b[k] = statistic([scores_b[i] for i in idx])
    diff = agg_b - agg_a
    spread = diff.std(ddof=1) if n > 1 else 0.0
    if spread <= 1e-12 * max(1.0, float(np.abs(diff).max())):
        mean_diff = float(diff.mean())
        if abs(mean_diff) <= 1e-12:
            t_stat, p = 0.0, 1.0
        else:
            t_stat, p = float(np.sign(mean_diff) * np.inf), 0.0
    else:
        res = stats.ttest_rel(agg_b, agg_a)
        t_stat, p = float(res.statistic), float(res.pvalue)
    return BootstrapResult(p, t_stat, float(agg_a.mean()), float(agg_b.mean()), agg_a, agg_b)
