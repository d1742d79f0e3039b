"""Two-stage training, pseudo-box generation and detection-based counting."""
from __future__ import annotations

import copy
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torchvision.ops import nms as tv_nms

from fscd.datamodel import AnnotatedImage, DatasetError, PredictionRecord
from fscd.detector import (
    FewShotDetector,
    ModelConfig,
    decode_box_tensor,
    desk_model_config,
    paper_model_config,
    save_checkpoint,
)
from fscd.features import preprocess_image
from fscd.geometry import Box, boxes_to_array, pairwise_iou
from fscd.losses import UNCERTAINTY_KINDS, LossWeights, combined_loss
from fscd.metrics import EvalReport, evaluate

log = logging.getLogger(__name__)

PSEUDO_MAX_OFFSET = 0.05
SCORE_EPS = 1e-7


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1
    lr_backbone: float = 1e-5
    lr_transformer: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    K: int = 3
    M: int = 600
    seed: int = 0
    score_threshold: float = 0.5
    uncertainty: str = "laplace"
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    lr_drop_epoch: int | None = None
    aux_loss: bool = True
    hflip_prob: float = 0.5
    vflip_prob: float = 0.0
    nms: bool = False
    nms_iou: float = 0.5
    focal_cost: bool = False
    model: ModelConfig | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_backbone <= 0 or self.lr_transformer <= 0:
            raise ValueError("learning rates must be positive")
        if self.uncertainty not in UNCERTAINTY_KINDS:
            raise ValueError(f"uncertainty must be one of {UNCERTAINTY_KINDS}")
        if not (0.0 <= self.hflip_prob <= 1.0 and 0.0 <= self.vflip_prob <= 1.0):
            raise ValueError("flip probabilities must be in [0, 1]")
        if self.lr_drop_epoch is not None and self.lr_drop_epoch < 1:
            raise ValueError("lr_drop_epoch must be >= 1")
        if not 0.0 <= self.score_threshold < 1.0:
            raise ValueError("score_threshold must be in [0, 1)")
        if self.model is not None and self.model.detector.num_queries != self.M:
            raise ValueError(f"model num_queries {self.model.detector.num_queries} != M {self.M}")

    def model_config(self) -> ModelConfig:
        if self.model is not None:
            return self.model
        return paper_model_config(self.M)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = None if self.model is None else self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if isinstance(d.get("model"), dict):
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


DESK_WEIGHTS = LossWeights(focal=2, l1=5, giou=2, uncertainty=0.05)


def desk_config(stage: int = 2, **overrides) -> TrainConfig:
    """Single-CPU synthetic setting: tiny backbone, small transformer, M=100.

    The small model trains from scratch, so the backbone rate is ten times the
    published one, and in stage 2 the transformer rate is too (stage 1 diverges
    at that rate). The uncertainty weight is lowered as well: synthetic pseudo
    boxes are accurate, sigma shrinks towards its floor and at the published
    weight the 1/sigma-scaled box gradient swamps classification. Synthetic
    scenes have no up or down, so vertical flips are on too. Trained this way
    the model is underconfident and counts are read off at score 0.4.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    m = overrides.pop("M", 100)
    model = overrides.pop("model", None) or desk_model_config(m)
    base = dict(epochs=30, batch_size=1, lr_backbone=1e-4, lr_transformer=1e-3 if stage == 2 else 1e-4,
                M=m, grad_clip=0.1, weights=DESK_WEIGHTS, model=model, vflip_prob=0.5, score_threshold=0.4)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class PseudoLabeledImage:
    base: AnnotatedImage
    pseudo_boxes: tuple[Box, ...]

    def __post_init__(self) -> None:
        self.pseudo_boxes = tuple(self.pseudo_boxes)
        if len(self.pseudo_boxes) != len(self.base.dots):
            raise DatasetError(
                f"{self.base.image_id}: {len(self.pseudo_boxes)} pseudo boxes for {len(self.base.dots)} dots"
            )
        for b, d in zip(self.pseudo_boxes, self.base.dots):
            if math.hypot(b.cx - d[0], b.cy - d[1]) > PSEUDO_MAX_OFFSET + 1e-9:
                raise DatasetError(f"{self.base.image_id}: pseudo box center too far from its dot")


@dataclass
class TrainResult:
    model: FewShotDetector
    epoch_losses: list[float]
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None
    val_history: list[EvalReport] = field(default_factory=list)


# ---------------------------------------------------------------- helpers


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def _stack_images(records: Sequence[AnnotatedImage]) -> torch.Tensor:
    return _stack([preprocess_image(r.image) for r in records])


def _stack(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    if len({tuple(t.shape) for t in tensors}) > 1:
        raise PipelineError("images in one batch differ in size; use batch_size=1 or resize the dataset")
    return torch.stack(list(tensors))


def _augment(images, points, boxes, rng, cfg):
    """Random horizontal/vertical flip of one group: images, (B, K, 2) points and a list of cxcywh targets."""
    for axis, prob in ((0, cfg.hflip_prob), (1, cfg.vflip_prob)):
        if prob > 0 and rng.random() < prob:
            images = images.flip(3 - axis)
            points = points.clone()
            points[..., axis] = 1 - points[..., axis]
            flipped = []
            for b in boxes:
                b = b.clone()
                b[:, axis] = 1 - b[:, axis]
                flipped.append(b)
            boxes = flipped
    return images, points, boxes


def _centers(boxes: Sequence[Box]) -> torch.Tensor:
    return torch.tensor([[b.cx, b.cy] for b in boxes], dtype=torch.float32).reshape(-1, 2)


def _box_tensor(boxes: Sequence[Box]) -> torch.Tensor:
    return torch.as_tensor(boxes_to_array(boxes), dtype=torch.float32)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _make_optimizer(model: FewShotDetector, cfg: TrainConfig):
    """AdamW plus a per-epoch scheduler that divides both rates by 10 at ``lr_drop_epoch``."""
    opt = torch.optim.AdamW(model.parameter_groups(cfg.lr_backbone, cfg.lr_transformer, cfg.weight_decay))
    milestones = [] if cfg.lr_drop_epoch is None else [cfg.lr_drop_epoch]
    return opt, torch.optim.lr_scheduler.MultiStepLR(opt, milestones, gamma=0.1)


def _step(model, opt, loss, clip):
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if clip and clip > 0:
        torch.nn.utils.clip_grad_norm_([p for p in model.parameters() if p.requires_grad], clip)
    opt.step()


def _query_loss(out, queries, targets, config: TrainConfig, mode: str) -> torch.Tensor:
    """Loss for one image, over the final decoder layer and (with ``aux_loss``) every earlier one."""
    kw = {} if mode == "stage1" else dict(uncertainty=config.uncertainty, focal_cost=config.focal_cost)
    layers = [out] + (out.aux if config.aux_loss else [])
    return sum(combined_loss(o, queries, targets, config.weights, mode=mode, **kw).total for o in layers)


def _group_by_k(records, idx):
    """Split a batch so each sub-batch shares one exemplar count and one image size."""
    groups: dict[tuple, list[int]] = {}
    for i in idx:
        key = (len(records[i].exemplars), records[i].image.shape[:2])
        groups.setdefault(key, []).append(int(i))
    return list(groups.values())


def _ckpt_dir(path) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- stage 1


def train_stage1(
    dataset: Sequence[AnnotatedImage],
    config: TrainConfig,
    checkpoint_dir: str | Path | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train with exemplar centers as queries, each paired with its own box; detection loss only."""
    if len(dataset) == 0:
        raise PipelineError("train_stage1: empty dataset")
    for r in dataset:
        r.validate(k=None, dot_tolerance_px=None)
        if len(r.exemplars) > config.K:
            raise PipelineError(f"{r.image_id}: {len(r.exemplars)} exemplars, more than K={config.K}")
    seed_everything(config.seed)
    model = FewShotDetector(config.model_config())
    model.train()
    opt, sched = _make_optimizer(model, config)
    images = [preprocess_image(r.image) for r in dataset]
    centers = [_centers(r.exemplars) for r in dataset]
    targets = [_box_tensor(r.exemplars) for r in dataset]
    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng(config.seed + 1)
    out_dir = _ckpt_dir(checkpoint_dir)
    losses: list[float] = []
    last = None
    for epoch in range(config.epochs):
        total, n = 0.0, 0
        for batch in _batches(len(dataset), config.batch_size, rng):
            for group in _group_by_k(dataset, batch):
                img, q, tg = _augment(
                    _stack([images[i] for i in group]), torch.stack([centers[i] for i in group]),
                    [targets[i] for i in group], aug_rng, config,
                )
                out = model(img, q, queries=q, aux=config.aux_loss)
                loss = sum(_query_loss(out.select(j), q[j], tg[j], config, "stage1") for j in range(len(group)))
                loss = loss / len(group)
                _step(model, opt, loss, config.grad_clip)
                total += loss.item() * len(group)
                n += len(group)
        sched.step()
        losses.append(total / n)
        if progress:
            progress(epoch, losses[-1])
        log.info("stage1 epoch %d loss %.4f", epoch, losses[-1])
        if out_dir is not None:
            last = out_dir / f"stage1_epoch{epoch:03d}.ckpt"
            save_checkpoint(model, last, stage=1, epoch=epoch, loss=losses[-1], train_config=config.to_dict())
    best = None
    if out_dir is not None:
        best = out_dir / "best.ckpt"
        save_checkpoint(model, best, stage=1, epoch=config.epochs - 1, loss=losses[-1], train_config=config.to_dict())
    model.eval()
    return TrainResult(model, losses, last, best)


# ---------------------------------------------------------------- pseudo boxes


@torch.no_grad()
def predict_at_points(model: FewShotDetector, record: AnnotatedImage, points: np.ndarray):
    """Raw outputs and decoded boxes for explicit query points on one image."""
    model.eval()
    img = preprocess_image(record.image)[None]
    q = torch.as_tensor(np.asarray(points, dtype=np.float32).reshape(1, -1, 2))
    out = model(img, _centers(record.exemplars)[None], queries=q)
    boxes = decode_box_tensor(out.box_params, q)[0]
    return out.select(0), boxes


def _limit_offset(boxes: np.ndarray, dots: np.ndarray, max_offset: float) -> np.ndarray:
    off = boxes[:, :2] - dots
    norm = np.linalg.norm(off, axis=1, keepdims=True)
    scale = np.minimum(1.0, max_offset / np.maximum(norm, 1e-12))
    out = boxes.copy()
    out[:, :2] = dots + off * scale
    return out


def generate_pseudo_boxes(model: FewShotDetector, dataset: Sequence[AnnotatedImage]) -> list[PseudoLabeledImage]:
    """One box per dot, with the dots as queries. Scores are ignored."""
    out = []
    for r in dataset:
        if len(r.dots) == 0:
            raise PipelineError(f"{r.image_id}: no dot annotations to use as queries")
        _, boxes = predict_at_points(model, r, r.dots)
        arr = _limit_offset(boxes.double().numpy(), r.dots, PSEUDO_MAX_OFFSET)
        arr[:, 2:] = np.maximum(arr[:, 2:], 1e-4)
        out.append(PseudoLabeledImage(r, tuple(Box.from_array(b) for b in arr)))
    return out


def pseudo_box_iou(pseudo: Sequence[PseudoLabeledImage]) -> float:
    """Mean IoU between each pseudo box and the GT box of the same dot."""
    vals = []
    for p in pseudo:
        if p.base.gt_boxes is None:
            raise PipelineError(f"{p.base.image_id}: no gt_boxes to compare against")
        m = pairwise_iou(boxes_to_array(p.pseudo_boxes), boxes_to_array(p.base.gt_boxes))
        vals.extend(np.diag(m))
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------- stage 2


def reanchor(model: FewShotDetector, m: int) -> FewShotDetector:
    """Copy of ``model`` whose fixed-grid lattice has ``m`` anchors."""
    cfg = ModelConfig(model.cfg.backbone, replace(model.cfg.detector, num_queries=m))
    new = FewShotDetector(cfg)
    state = {k: v for k, v in model.state_dict().items() if k != "anchors"}
    new.load_state_dict(state, strict=False)
    return new


def train_stage2(
    pseudo_dataset: Sequence[PseudoLabeledImage],
    stage1_model: FewShotDetector,
    config: TrainConfig,
    val_dataset: Sequence[AnnotatedImage] | None = None,
    checkpoint_dir: str | Path | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fine-tune on pseudo boxes with lattice anchors, Hungarian matching and the uncertainty term."""
    if len(pseudo_dataset) == 0:
        raise PipelineError("train_stage2: empty pseudo-labeled dataset")
    if stage1_model.cfg.detector.num_queries != config.M:
        raise PipelineError(
            f"config M={config.M} but the stage-1 checkpoint was built for "
            f"{stage1_model.cfg.detector.num_queries} anchors (use reanchor())"
        )
    seed_everything(config.seed)
    model = copy.deepcopy(stage1_model)
    model.train()
    if config.uncertainty == "none" or config.weights.uncertainty == 0:
        for p in model.transformer.sigma_head.parameters():
            p.requires_grad_(False)
    opt, sched = _make_optimizer(model, config)
    base = [p.base for p in pseudo_dataset]
    images = [preprocess_image(r.image) for r in base]
    ex_centers = [_centers(r.exemplars) for r in base]
    targets = [_box_tensor(p.pseudo_boxes) for p in pseudo_dataset]
    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng(config.seed + 1)
    out_dir = _ckpt_dir(checkpoint_dir)
    losses: list[float] = []
    history: list[EvalReport] = []
    best_mae = math.inf
    best_path = last = None
    for epoch in range(config.epochs):
        total, n = 0.0, 0
        for batch in _batches(len(base), config.batch_size, rng):
            for group in _group_by_k(base, batch):
                img, ex, tg = _augment(
                    _stack([images[i] for i in group]), torch.stack([ex_centers[i] for i in group]),
                    [targets[i] for i in group], aug_rng, config,
                )
                q = model.anchor_queries(len(group))
                out = model(img, ex, queries=q, aux=config.aux_loss)
                loss = sum(_query_loss(out.select(j), q[j], tg[j], config, "stage2") for j in range(len(group)))
                loss = loss / len(group)
                _step(model, opt, loss, config.grad_clip)
                total += loss.item() * len(group)
                n += len(group)
        sched.step()
        losses.append(total / n)
        if progress:
            progress(epoch, losses[-1])
        log.info("stage2 epoch %d loss %.4f", epoch, losses[-1])
        report = None
        if val_dataset:
            report = evaluate(predict_dataset(model, val_dataset, config), val_dataset)
            history.append(report)
            model.train()
        if out_dir is not None:
            last = out_dir / f"stage2_epoch{epoch:03d}.ckpt"
            meta = dict(stage=2, epoch=epoch, loss=losses[-1], train_config=config.to_dict())
            save_checkpoint(model, last, **meta)
            mae = report.mae if report is not None else -epoch
            if mae <= best_mae:
                best_mae = mae
                best_path = out_dir / "best.ckpt"
                save_checkpoint(model, best_path, **meta)
    model.eval()
    return TrainResult(model, losses, last, best_path, history)


# ---------------------------------------------------------------- inference


def _scores_float64(logits: torch.Tensor) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-logits.double().numpy()))
    return np.clip(s, SCORE_EPS, 1.0 - SCORE_EPS)


@torch.no_grad()
def predict(
    model: FewShotDetector,
    image: np.ndarray,
    exemplars: Sequence[Box],
    score_threshold: float = 0.5,
    image_id: str = "",
    queries: np.ndarray | None = None,
    nms_iou: float | None = None,
) -> PredictionRecord:
    """Detections are decoded boxes scoring above ``score_threshold``; count = number of detections."""
    model.eval()
    img = preprocess_image(image)[None]
    ex = _centers(exemplars)[None]
    q = model.anchor_queries(1) if queries is None else torch.as_tensor(queries, dtype=torch.float32)[None]
    out = model(img, ex, queries=q)
    return _record_from_output(image_id, out.logits[0], decode_box_tensor(out.box_params, q)[0], score_threshold, nms_iou)


def _record_from_output(image_id, logits, boxes, threshold, nms_iou) -> PredictionRecord:
    scores = _scores_float64(logits)
    keep = np.nonzero(scores > threshold)[0]
    if nms_iou is not None and len(keep):
        b = boxes[keep]
        xyxy = torch.cat([b[:, :2] - b[:, 2:] / 2, b[:, :2] + b[:, 2:] / 2], dim=1)
        kept = tv_nms(xyxy, torch.as_tensor(scores[keep], dtype=torch.float32), nms_iou).numpy()
        keep = keep[kept]
    keep = keep[np.argsort(-scores[keep], kind="mergesort")]
    arr = boxes.double().numpy()[keep]
    arr[:, 2:] = np.maximum(arr[:, 2:], 1e-4)
    return PredictionRecord(image_id, tuple(Box.from_array(a) for a in arr), tuple(scores[keep].tolist()))


@torch.no_grad()
def predict_dataset(
    model: FewShotDetector,
    dataset: Sequence[AnnotatedImage],
    config: TrainConfig | None = None,
    batch_size: int = 16,
    score_threshold: float | None = None,
) -> list[PredictionRecord]:
    model.eval()
    thr = score_threshold if score_threshold is not None else (config.score_threshold if config else 0.5)
    nms_iou = config.nms_iou if (config is not None and config.nms) else None
    out_records: list[PredictionRecord] = []
    for start in range(0, len(dataset), batch_size):
        chunk = list(range(start, min(start + batch_size, len(dataset))))
        for group in _group_by_k(dataset, chunk):
            recs = [dataset[i] for i in group]
            imgs = _stack_images(recs)
            ex = torch.stack([_centers(r.exemplars) for r in recs])
            q = model.anchor_queries(len(recs))
            out = model(imgs, ex, queries=q)
            boxes = decode_box_tensor(out.box_params, q)
            for j, r in enumerate(recs):
                out_records.append(_record_from_output(r.image_id, out.logits[j], boxes[j], thr, nms_iou))
    order = {r.image_id: i for i, r in enumerate(dataset)}
    return sorted(out_records, key=lambda p: order[p.image_id])


def evaluate_model(model: FewShotDetector, dataset: Sequence[AnnotatedImage], config: TrainConfig | None = None) -> EvalReport:
    return evaluate(predict_dataset(model, dataset, config), dataset)


def stage1_exemplar_iou(model: FewShotDetector, dataset: Sequence[AnnotatedImage]) -> float:
    """Mean IoU of boxes predicted at the exemplar centers against the exemplar boxes."""
    vals = []
    for r in dataset:
        _, boxes = predict_at_points(model, r, _centers(r.exemplars).numpy())
        m = pairwise_iou(boxes.double().numpy(), boxes_to_array(r.exemplars))
        vals.extend(np.diag(m))
    return float(np.mean(vals))
