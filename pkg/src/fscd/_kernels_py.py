"""Pure-Python/numpy reference versions of the compiled kernels.

Used when ``fscd._kernels`` is not built, or when ``FSCD_PURE_PYTHON=1``.
Signatures and return types match the Cython module exactly.
"""
from __future__ import annotations

import math

import numpy as np


def linear_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of every row to a distinct column.

    Requires ``n_rows <= n_cols``. Returns ``col_of_row`` (length n_rows).
    Shortest augmenting path with dual potentials, O(n^2 m).
    """
    a = np.asarray(cost, dtype=np.float64)
    n, m = a.shape
    if n > m:
        raise ValueError("linear_assignment needs n_rows <= n_cols")
    rows = a.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of_row = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _inter_union_enclose(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclose = ewh[..., 0] * ewh[..., 1]
    return inter, union, enclose


def pairwise_iou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, _ = _inter_union_enclose(a, b)
    return inter / union


def pairwise_giou_xyxy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, enclose = _inter_union_enclose(a, b)
    return inter / union - np.maximum(enclose - union, 0.0) / enclose


def greedy_match(ious: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """True-positive flags for score-sorted predictions at each IoU threshold.

    ``ious`` is ``(P, G)`` with rows already in descending score order.
    Each prediction takes the unmatched GT of highest IoU that clears the
    threshold. Returns a ``(len(thresholds), P)`` uint8 array.
    """
    ious = np.asarray(ious, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    n_pred, n_gt = ious.shape
    out = np.zeros((len(thresholds), n_pred), dtype=np.uint8)
    for t, thr in enumerate(thresholds):
        taken = [False] * n_gt
        for i in range(n_pred):
            best = -1
            best_iou = thr
            row = ious[i]
            for g in range(n_gt):
                if not taken[g] and row[g] >= best_iou:
                    if best < 0 or row[g] > best_iou:
                        best_iou = row[g]
                        best = g
            if best >= 0:
                taken[best] = True
                out[t, i] = 1
    return out
