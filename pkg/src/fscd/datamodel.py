"""Dataset records, annotation I/O, the synthetic scene generator and prediction files.

On disk everything is in pixels, corner form (``[x1, y1, x2, y2]``), the way
FSC-147 ships its annotations. In memory everything is normalized
center form (:class:`~fscd.geometry.Box`).
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from fscd.geometry import Box, DegenerateBoxError, boxes_to_array, pairwise_iou

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_K = 3
SHAPE_KINDS = ("rectangle", "ellipse", "triangle")

# well-separated hues, RGB
_PALETTE = np.array(
    [
        [220, 40, 40],
        [40, 170, 60],
        [50, 80, 220],
        [230, 200, 40],
        [200, 60, 210],
        [40, 200, 210],
        [240, 130, 30],
        [245, 245, 245],
    ],
    dtype=np.float64,
)


class DatasetError(Exception):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class SchemaViolation(DatasetError, ValueError):
    def __init__(self, record: str, fieldname: str, reason: str):
        self.record = record
        self.field = fieldname
        super().__init__(f"record {record!r}, field {fieldname!r}: {reason}")


class ExemplarCountError(SchemaViolation):
    pass


class InfeasibleSpecError(DatasetError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    image_id: str
    image: np.ndarray
    dots: np.ndarray
    exemplars: tuple[Box, ...]
    gt_boxes: tuple[Box, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "dots", np.asarray(self.dots, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "exemplars", tuple(self.exemplars))
        if self.gt_boxes is not None:
            object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))
        self.image.setflags(write=False)
        self.dots.setflags(write=False)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def count(self) -> int:
        return len(self.dots)

    def validate(self, k: int | None = DEFAULT_K, dot_tolerance_px: float | None = 2.0) -> None:
        """Raise :class:`SchemaViolation` on the first broken invariant.

        ``k=None`` accepts any exemplar count >= 1 (permissive mode).
        """
        rid = self.image_id
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise SchemaViolation(rid, "image", f"expected HxWx3 array, got shape {self.image.shape}")
        if len(self.exemplars) == 0:
            raise ExemplarCountError(rid, "exemplars", "at least one exemplar box is required")
        if k is not None and len(self.exemplars) != k:
            raise ExemplarCountError(rid, "exemplars", f"expected {k} exemplars, got {len(self.exemplars)}")
        if len(self.dots) and (not np.all(np.isfinite(self.dots)) or self.dots.min() < 0 or self.dots.max() > 1):
            raise SchemaViolation(rid, "dots", "dots must be finite and inside the image")
        scale = np.array([self.width, self.height], dtype=np.float64)
        if dot_tolerance_px is not None:
            for i, ex in enumerate(self.exemplars):
                if len(self.dots) == 0:
                    raise SchemaViolation(rid, "dots", "exemplars given but no dot annotations")
                d = np.abs((self.dots - np.array([ex.cx, ex.cy])) * scale).max(axis=1)
                if d.min() > dot_tolerance_px:
                    raise SchemaViolation(
                        rid, "exemplars", f"exemplar {i} center is {d.min():.2f}px from the nearest dot"
                    )
        if self.gt_boxes is not None:
            if len(self.gt_boxes) != len(self.dots):
                raise SchemaViolation(
                    rid, "gt_boxes", f"{len(self.gt_boxes)} boxes for {len(self.dots)} dots"
                )
            for i, (b, d) in enumerate(zip(self.gt_boxes, self.dots)):
                if not b.contains(d[0], d[1], tol=1e-9):
                    raise SchemaViolation(rid, "gt_boxes", f"dot {i} lies outside its paired box")


@dataclass(frozen=True)
class SyntheticSceneSpec:
    num_images: int = 200
    classes_per_image: tuple[int, int] = (2, 3)
    instances_per_class: tuple[int, int] = (6, 14)
    shape_vocabulary: tuple[str, ...] = SHAPE_KINDS
    size_jitter: tuple[float, float] = (0.85, 1.15)
    seed: int = 0
    image_size: int = 128
    # object base size as a fraction of the canvas side
    base_size: tuple[float, float] = (0.06, 0.12)
    k: int = DEFAULT_K
    noise_std: float = 6.0
    max_retries: int = 20

    def __post_init__(self) -> None:
        for name in ("classes_per_image", "instances_per_class", "size_jitter", "base_size"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.classes_per_image[0] < 2:
            raise ValueError("classes_per_image must allow at least 2 classes per image")
        if self.classes_per_image[1] > len(_PALETTE):
            raise ValueError(f"at most {len(_PALETTE)} classes per image are supported")
        if self.instances_per_class[0] < self.k:
            raise ValueError("instances_per_class lower bound must be >= k")
        bad = set(self.shape_vocabulary) - set(SHAPE_KINDS)
        if bad or not self.shape_vocabulary:
            raise ValueError(f"unknown shape kinds {sorted(bad)}")
        if self.size_jitter[0] <= 0 or self.num_images < 0:
            raise ValueError("size_jitter must be positive and num_images non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSceneSpec:
        d = dict(d)
        for key in ("classes_per_image", "instances_per_class", "size_jitter", "base_size", "shape_vocabulary"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    boxes: tuple[Box, ...]
    scores: tuple[float, ...]
    count: int = field(default=-1)

    def __post_init__(self) -> None:
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if self.count == -1:
            object.__setattr__(self, "count", len(self.boxes))
        if len(self.boxes) != len(self.scores):
            raise SchemaViolation(self.image_id, "scores", f"{len(self.scores)} scores for {len(self.boxes)} boxes")
        if self.count != len(self.boxes):
            raise SchemaViolation(self.image_id, "count", f"count {self.count} != {len(self.boxes)} boxes")
        if any(not 0.0 < s < 1.0 for s in self.scores):
            raise SchemaViolation(self.image_id, "scores", "scores must lie strictly inside (0, 1)")


# ---------------------------------------------------------------- loading


def _box_from_pixels(rid: str, fieldname: str, raw, w: int, h: int) -> Box:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.shape == (4, 2):
        # FSC-147 stores exemplars as four corner points
        x1, y1 = arr.min(axis=0)
        x2, y2 = arr.max(axis=0)
    elif arr.shape == (4,):
        x1, y1, x2, y2 = arr
    else:
        raise SchemaViolation(rid, fieldname, f"box must be [x1,y1,x2,y2], got {raw!r}")
    try:
        return Box.from_corners(x1 / w, y1 / h, x2 / w, y2 / h)
    except DegenerateBoxError as exc:
        raise SchemaViolation(rid, fieldname, str(exc)) from None


def _record_from_json(rid: str, rec: dict, image_dir: Path) -> AnnotatedImage:
    if not isinstance(rec, dict):
        raise SchemaViolation(rid, "<record>", "expected an object")
    fname = rec.get("image", rec.get("file_name", rid))
    img_path = image_dir / fname
    if not img_path.exists():
        raise MissingFileError(f"image for record {rid!r} not found: {img_path}")
    with Image.open(img_path) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    h, w = image.shape[:2]
    if "width" in rec and "height" in rec and (int(rec["width"]), int(rec["height"])) != (w, h):
        raise SchemaViolation(rid, "width", f"declared {rec['width']}x{rec['height']}, image is {w}x{h}")
    dots_raw = rec.get("dots", rec.get("points"))
    if dots_raw is None:
        raise SchemaViolation(rid, "dots", "missing")
    dots = np.asarray(dots_raw, dtype=np.float64).reshape(-1, 2) / np.array([w, h])
    ex_raw = rec.get("exemplars", rec.get("box_examples_coordinates"))
    if ex_raw is None:
        raise SchemaViolation(rid, "exemplars", "missing")
    exemplars = [_box_from_pixels(rid, "exemplars", b, w, h) for b in ex_raw]
    gt = rec.get("gt_boxes")
    gt_boxes = None if gt is None else [_box_from_pixels(rid, "gt_boxes", b, w, h) for b in gt]
    return AnnotatedImage(rid, image, dots, tuple(exemplars), None if gt_boxes is None else tuple(gt_boxes))


def annotation_path(root: str | os.PathLike, split: str) -> Path:
    return Path(root) / f"annotations_{split}.json"


def load_dataset(
    path: str | os.PathLike,
    split: str,
    strict: bool = True,
    k: int = DEFAULT_K,
    image_dir: str | os.PathLike | None = None,
    dot_tolerance_px: float | None = 2.0,
) -> list[AnnotatedImage]:
    """Load ``annotations_{split}.json`` under ``path`` (or ``path`` itself if it is a file)."""
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    p = Path(path)
    ann = p if p.is_file() else annotation_path(p, split)
    if not ann.exists():
        raise MissingFileError(f"annotation file not found: {ann}")
    text = ann.read_text(encoding="utf-8")
    if not text.strip():
        log.warning("annotation file %s is empty", ann)
        return []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation(str(ann), "<document>", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaViolation(str(ann), "<document>", "expected an object mapping image_id -> record")
    if not doc:
        log.warning("annotation file %s has no records", ann)
        return []
    img_root = Path(image_dir) if image_dir is not None else ann.parent / "images"
    out = []
    for rid in sorted(doc):
        rec = _record_from_json(rid, doc[rid], img_root)
        rec.validate(k=k if strict else None, dot_tolerance_px=dot_tolerance_px)
        if not strict and len(rec.exemplars) > k:
            raise ExemplarCountError(rid, "exemplars", f"more than {k} exemplars")
        out.append(rec)
    return out


def _to_pixel_corners(b: Box, w: int, h: int) -> list[float]:
    x1, y1, x2, y2 = b.to_corners()
    return [x1 * w, y1 * h, x2 * w, y2 * h]


def save_dataset(records: Sequence[AnnotatedImage], root: str | os.PathLike, split: str) -> Path:
    """Write images as PNG plus ``annotations_{split}.json``. Returns the annotation path."""
    root = Path(root)
    img_dir = root / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    doc = {}
    for r in records:
        fname = f"{r.image_id}.png"
        Image.fromarray(np.asarray(r.image, dtype=np.uint8)).save(img_dir / fname, optimize=False)
        w, h = r.width, r.height
        rec = {
            "image": fname,
            "width": w,
            "height": h,
            "dots": (r.dots * np.array([w, h])).tolist(),
            "exemplars": [_to_pixel_corners(b, w, h) for b in r.exemplars],
        }
        if r.gt_boxes is not None:
            rec["gt_boxes"] = [_to_pixel_corners(b, w, h) for b in r.gt_boxes]
        doc[r.image_id] = rec
    ann = annotation_path(root, split)
    ann.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return ann


# ---------------------------------------------------------------- synthetic scenes


def _shape_mask(kind: str, x1: float, y1: float, w: float, h: float, size: int):
    """Boolean mask for a shape whose tight box is (x1, y1, w, h) in pixels, plus its slice."""
    r0, r1 = int(math.floor(y1)), int(math.ceil(y1 + h))
    c0, c1 = int(math.floor(x1)), int(math.ceil(x1 + w))
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, size), min(c1, size)
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64) + 0.5
    u = (xx - x1) / w
    v = (yy - y1) / h
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if kind == "ellipse":
        inside &= (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif kind == "triangle":
        # apex at top center, base along the bottom edge
        inside &= np.abs(u - 0.5) <= 0.5 * v
    return (slice(r0, r1), slice(c0, c1)), inside


def _render_background(rng: np.random.Generator, size: int, noise_std: float) -> np.ndarray:
    base = rng.uniform(40, 110, size=3)
    gx, gy = rng.uniform(-25, 25, size=2)
    lin = np.linspace(-0.5, 0.5, size)
    grad = gx * lin[None, :] + gy * lin[:, None]
    img = base[None, None, :] + grad[..., None]
    img = img + rng.normal(0.0, noise_std, size=(size, size, 3))
    return img


def _place_instances(rng, n, box_size, jitter, size, occupied, margin=1.0):
    """Rejection-sample ``n`` non-overlapping boxes; ``None`` if the budget runs out."""
    bw, bh = box_size
    placed = []
    for _ in range(n):
        for _attempt in range(200):
            sx = rng.uniform(*jitter)
            sy = sx * rng.uniform(0.95, 1.05)
            w, h = max(bw * sx, 3.0), max(bh * sy, 3.0)
            if w >= size - 2 or h >= size - 2:
                return None
            x1 = rng.uniform(1.0, size - w - 1.0)
            y1 = rng.uniform(1.0, size - h - 1.0)
            cand = (x1, y1, x1 + w, y1 + h)
            if all(
                cand[0] >= o[2] + margin or o[0] >= cand[2] + margin or cand[1] >= o[3] + margin or o[1] >= cand[3] + margin
                for o in occupied
            ):
                occupied.append(cand)
                placed.append(cand)
                break
        else:
            return None
    return placed


def _generate_one(spec: SyntheticSceneSpec, rng: np.random.Generator, image_id: str) -> AnnotatedImage:
    size = spec.image_size
    for _retry in range(spec.max_retries):
        n_classes = int(rng.integers(spec.classes_per_image[0], spec.classes_per_image[1] + 1))
        colors = rng.choice(len(_PALETTE), size=n_classes, replace=False)
        img = _render_background(rng, size, spec.noise_std)
        occupied: list = []
        classes = []
        ok = True
        for c in range(n_classes):
            kind = spec.shape_vocabulary[int(rng.integers(len(spec.shape_vocabulary)))]
            base = rng.uniform(*spec.base_size) * size
            aspect = rng.uniform(0.6, 1.6)
            box_size = (base * math.sqrt(aspect), base / math.sqrt(aspect))
            n = int(rng.integers(spec.instances_per_class[0], spec.instances_per_class[1] + 1))
            placed = _place_instances(rng, n, box_size, spec.size_jitter, size, occupied)
            if placed is None:
                ok = False
                break
            classes.append((kind, _PALETTE[colors[c]], placed))
        if not ok:
            continue
        for kind, color, placed in classes:
            for x1, y1, x2, y2 in placed:
                sl, mask = _shape_mask(kind, x1, y1, x2 - x1, y2 - y1, size)
                shade = color * rng.uniform(0.85, 1.0) + rng.normal(0, 4, size=3)
                region = img[sl]
                region[mask] = shade
        image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
        # class 0 is the target class
        target = classes[0][2]
        gt = [Box.from_corners(x1 / size, y1 / size, x2 / size, y2 / size) for x1, y1, x2, y2 in target]
        dots = np.array([[b.cx, b.cy] for b in gt])
        ex_idx = rng.choice(len(gt), size=spec.k, replace=False)
        exemplars = tuple(gt[i] for i in sorted(ex_idx))
        return AnnotatedImage(image_id, image, dots, exemplars, tuple(gt))
    raise InfeasibleSpecError(
        f"could not place instances for {image_id} within {spec.max_retries} retries; "
        "reduce instances_per_class or base_size"
    )


def generate_synthetic(spec: SyntheticSceneSpec, prefix: str = "syn") -> list[AnnotatedImage]:
    """Render ``spec.num_images`` crowded multi-class scenes. Pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(spec.num_images):
        rec = _generate_one(spec, rng, f"{prefix}{i:05d}")
        rec.validate(k=spec.k)
        out.append(rec)
    return out


def max_same_class_iou(rec: AnnotatedImage) -> float:
    if rec.gt_boxes is None or len(rec.gt_boxes) < 2:
        return 0.0
    arr = boxes_to_array(rec.gt_boxes)
    m = pairwise_iou(arr, arr)
    np.fill_diagonal(m, 0.0)
    return float(m.max())


# ---------------------------------------------------------------- predictions


def save_predictions(records: Iterable[PredictionRecord], path: str | os.PathLike) -> None:
    doc = [
        {
            "image_id": r.image_id,
            "boxes": [[b.cx, b.cy, b.w, b.h] for b in r.boxes],
            "scores": list(r.scores),
            "count": r.count,
        }
        for r in records
    ]
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_predictions(path: str | os.PathLike) -> list[PredictionRecord]:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"prediction file not found: {p}")
    doc = json.loads(p.read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise SchemaViolation(str(p), "<document>", "expected a JSON array")
    out = []
    for i, r in enumerate(doc):
        rid = str(r.get("image_id", f"#{i}"))
        for key in ("image_id", "boxes", "scores", "count"):
            if key not in r:
                raise SchemaViolation(rid, key, "missing")
        try:
            boxes = tuple(Box.from_array(b) for b in r["boxes"])
        except (DegenerateBoxError, IndexError, TypeError) as exc:
            raise SchemaViolation(rid, "boxes", str(exc)) from None
        out.append(PredictionRecord(rid, boxes, tuple(r["scores"]), int(r["count"])))
    return out
