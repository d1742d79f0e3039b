"""Axis-aligned boxes in normalized (cx, cy, w, h) form, IoU and GIoU.

Scalar helpers operate on :class:`Box`; the ``*_array`` variants take
``(N, 4)`` arrays and are what the evaluation and matching code use.
"""
from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

EPS = 1e-8


class DegenerateBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise DegenerateBoxError(f"non-finite box {vals}")
        if self.w <= EPS or self.h <= EPS:
            raise DegenerateBoxError(f"box has non-positive extent: w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> Box:
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> Box:
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def to_corners(self) -> tuple[float, float, float, float]:
        return to_corners(self)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains(self, x: float, y: float, tol: float = 0.0) -> bool:
        x1, y1, x2, y2 = self.to_corners()
        return x1 - tol <= x <= x2 + tol and y1 - tol <= y <= y2 + tol


def to_corners(b: Box) -> tuple[float, float, float, float]:
    hw, hh = b.w / 2.0, b.h / 2.0
    return (b.cx - hw, b.cy - hh, b.cx + hw, b.cy + hh)


def from_corners(x1: float, y1: float, x2: float, y2: float) -> Box:
    return Box.from_corners(x1, y1, x2, y2)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_array() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box.from_array(row) for row in np.asarray(arr, dtype=np.float64).reshape(-1, 4)]


def cxcywh_to_xyxy(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    half = a[..., 2:] / 2.0
    return np.concatenate([a[..., :2] - half, a[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.concatenate([(a[..., :2] + a[..., 2:]) / 2.0, a[..., 2:] - a[..., :2]], axis=-1)


def _iou_giou_xyxy(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    enclose = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    iou_ = inter / union
    # containment makes enclose == union; rounding must not push giou above iou
    return iou_, iou_ - max(0.0, enclose - union) / enclose


def iou(a: Box, b: Box) -> float:
    return _iou_giou_xyxy(to_corners(a), to_corners(b))[0]


def giou(a: Box, b: Box) -> float:
    return _iou_giou_xyxy(to_corners(a), to_corners(b))[1]


def iou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-form boxes in any consistent unit (e.g. pixels)."""
    return _iou_giou_xyxy(a, b)[0]


def giou_xyxy(a: Sequence[float], b: Sequence[float]) -> float:
    return _iou_giou_xyxy(a, b)[1]


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(N, 4) x (T, 4) -> (N, T)`` IoU for cxcywh arrays."""
    from fscd.kernels import pairwise_iou_xyxy

    return pairwise_iou_xyxy(cxcywh_to_xyxy(a).reshape(-1, 4), cxcywh_to_xyxy(b).reshape(-1, 4))


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    from fscd.kernels import pairwise_giou_xyxy

    return pairwise_giou_xyxy(cxcywh_to_xyxy(a).reshape(-1, 4), cxcywh_to_xyxy(b).reshape(-1, 4))
