"""Counting errors (MAE, RMSE, NAE, SRE) and pooled average precision."""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass

import numpy as np

from fscd import kernels
from fscd.geometry import boxes_to_array, cxcywh_to_xyxy

log = logging.getLogger(__name__)

COCO_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


@dataclass(frozen=True)
class CountPair:
    c_star: int
    c: int

    def __post_init__(self) -> None:
        if self.c_star < 0 or self.c < 0:
            raise ValueError("counts must be non-negative")


@dataclass(frozen=True)
class EvalReport:
    mae: float
    rmse: float
    nae: float
    sre: float
    map: float
    ap50: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        cols = ("MAE", "RMSE", "NAE", "SRE", "AP", "AP50")
        vals = (self.mae, self.rmse, self.nae, self.sre, 100 * self.map, 100 * self.ap50)
        head = "| " + " | ".join(f"{c:>7}" for c in cols) + " |"
        rule = "|" + "|".join("-" * 9 for _ in cols) + "|"
        row = "| " + " | ".join(f"{v:7.2f}" for v in vals) + " |"
        return "\n".join(["Counting: MAE RMSE NAE SRE | Detection: AP AP50", head, rule, row])


def counting_errors(pairs: Iterable[CountPair] | tuple[Sequence[int], Sequence[int]]) -> tuple[float, float, float, float]:
    """(MAE, RMSE, NAE, SRE). Images with zero GT count are left out of NAE and SRE."""
    if isinstance(pairs, tuple) and len(pairs) == 2 and not isinstance(pairs[0], CountPair):
        gt = np.asarray(pairs[0], dtype=np.float64)
        pr = np.asarray(pairs[1], dtype=np.float64)
    else:
        plist = list(pairs)
        gt = np.array([p.c_star for p in plist], dtype=np.float64)
        pr = np.array([p.c for p in plist], dtype=np.float64)
    if gt.shape != pr.shape or gt.ndim != 1:
        raise ValueError("GT and predicted counts must be 1-D and the same length")
    if gt.size == 0:
        raise ValueError("counting_errors needs at least one image")
    err = gt - pr
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err**2)))
    keep = gt > 0
    if not keep.all():
        log.warning("%d image(s) with zero GT count excluded from NAE/SRE", int((~keep).sum()))
    if not keep.any():
        return mae, rmse, math.nan, math.nan
    nae = float(np.mean(np.abs(err[keep]) / gt[keep]))
    sre = float(np.sqrt(np.mean(err[keep] ** 2 / gt[keep])))
    return mae, rmse, nae, sre


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray, method: str) -> float:
    if method == "coco101":
        env = np.maximum.accumulate(precision[::-1])[::-1] if precision.size else precision
        out = 0.0
        for r in np.linspace(0.0, 1.0, 101):
            i = np.searchsorted(recall, r, side="left")
            out += env[i] if i < env.size else 0.0
        return out / 101.0
    if method != "area":
        raise ValueError(f"unknown interpolation {method!r}")
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


def ap_per_threshold(
    pred_boxes: Sequence[np.ndarray],
    pred_scores: Sequence[np.ndarray],
    gt_boxes: Sequence[np.ndarray],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    method: str = "area",
) -> np.ndarray:
    """AP at each threshold, detections pooled over all images (cxcywh arrays)."""
    thr = np.asarray(iou_thresholds, dtype=np.float64)
    if not (len(pred_boxes) == len(pred_scores) == len(gt_boxes)):
        raise ValueError("need one prediction set and one GT set per image")
    n_gt = 0
    all_scores, all_tp = [], []
    for boxes, scores, gts in zip(pred_boxes, pred_scores, gt_boxes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
        n_gt += len(gts)
        if len(boxes) == 0:
            continue
        order = np.argsort(-scores, kind="mergesort")
        ious = kernels.pairwise_iou_xyxy(cxcywh_to_xyxy(boxes[order]), cxcywh_to_xyxy(gts)) if len(gts) else np.zeros((len(boxes), 0))
        all_tp.append(kernels.greedy_match(ious, thr))
        all_scores.append(scores[order])
    if n_gt == 0:
        return np.full(len(thr), 0.0 if all_scores else 1.0)
    if not all_scores:
        return np.zeros(len(thr))
    scores = np.concatenate(all_scores)
    tp = np.concatenate(all_tp, axis=1).astype(np.float64)
    order = np.argsort(-scores, kind="mergesort")
    tp = tp[:, order]
    out = np.empty(len(thr))
    for k in range(len(thr)):
        ctp = np.cumsum(tp[k])
        cfp = np.cumsum(1.0 - tp[k])
        out[k] = _interpolated_ap(ctp / n_gt, ctp / (ctp + cfp), method)
    return out


def average_precision(
    pred_boxes: Sequence[np.ndarray],
    pred_scores: Sequence[np.ndarray],
    gt_boxes: Sequence[np.ndarray],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    method: str = "area",
) -> tuple[float, float]:
    """(mAP over ``iou_thresholds``, AP at IoU 0.5)."""
    thr = np.asarray(iou_thresholds, dtype=np.float64)
    aps = ap_per_threshold(pred_boxes, pred_scores, gt_boxes, thr, method)
    hit = np.isclose(thr, 0.5)
    ap50 = float(aps[hit][0]) if hit.any() else float(ap_per_threshold(pred_boxes, pred_scores, gt_boxes, [0.5], method)[0])
    return float(aps.mean()), ap50


def evaluate(predictions, dataset, method: str = "area") -> EvalReport:
    """Score :class:`~fscd.datamodel.PredictionRecord` s against annotated images.

    Every image in ``dataset`` needs a prediction; detection metrics need
    ``gt_boxes``.
    """
    by_id = {p.image_id: p for p in predictions}
    missing = [r.image_id for r in dataset if r.image_id not in by_id]
    if missing:
        raise KeyError(f"no prediction for {len(missing)} image(s), e.g. {missing[0]!r}")
    mae, rmse, nae, sre = counting_errors(
        [CountPair(r.count, by_id[r.image_id].count) for r in dataset]
    )
    if any(r.gt_boxes is None for r in dataset):
        log.warning("some images lack gt_boxes; detection metrics reported as NaN")
        return EvalReport(mae, rmse, nae, sre, math.nan, math.nan)
    pb = [boxes_to_array(by_id[r.image_id].boxes) for r in dataset]
    ps = [np.asarray(by_id[r.image_id].scores) for r in dataset]
    gb = [boxes_to_array(r.gt_boxes) for r in dataset]
    m, ap50 = average_precision(pb, ps, gb, method=method)
    return EvalReport(mae, rmse, nae, sre, m, ap50)
