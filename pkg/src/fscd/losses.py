"""Hungarian matching and the training losses.

All box arithmetic is on normalized cxcywh tensors. Loss functions take
probabilities or sigma where that is the natural parameterization, and
have ``*_with_logits`` / ``*_log_sigma`` twins that the training loop uses
for numerical stability.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from fscd import kernels
from fscd.detector import DetectorOutput, decode_box_tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
UNCERTAINTY_KINDS = ("laplace", "gaussian", "none")


class NonFiniteCostError(ValueError):
    pass


class NonPositiveSigmaError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    focal: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    uncertainty: float = 2.0

    def __post_init__(self) -> None:
        for name in ("focal", "l1", "giou", "uncertainty"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_predictions: list[int]

    @property
    def pred_idx(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def target_idx(self) -> np.ndarray:
        return np.array([t for _, t in self.pairs], dtype=np.int64)


@dataclass
class LossReport:
    total: torch.Tensor
    terms: dict[str, float]
    match: MatchResult | None = None


# ---------------------------------------------------------------- boxes


def cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    c, s = b[..., :2], b[..., 2:] / 2
    return torch.cat([c - s, c + s], dim=-1)


def _giou_parts(a: torch.Tensor, b: torch.Tensor):
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    union = area_a + area_b - inter
    elt = torch.minimum(a[..., :2], b[..., :2])
    erb = torch.maximum(a[..., 2:], b[..., 2:])
    ewh = erb - elt
    enclose = ewh[..., 0] * ewh[..., 1]
    return inter / union - (enclose - union).clamp_min(0) / enclose


def giou_paired(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of cxcywh tensors with matching leading shapes."""
    return _giou_parts(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))


def giou_pairwise(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(N, 4) x (T, 4) cxcywh -> (N, T)."""
    return _giou_parts(cxcywh_to_xyxy(a)[:, None, :], cxcywh_to_xyxy(b)[None, :, :])


# ---------------------------------------------------------------- matching


def hungarian_match(cost: np.ndarray | torch.Tensor) -> MatchResult:
    """Minimum total-cost one-to-one pairing of predictions (rows) with targets (columns)."""
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().numpy()
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {c.shape}")
    n, t = c.shape
    if not np.all(np.isfinite(c)):
        raise NonFiniteCostError("cost matrix contains NaN or inf")
    if n == 0 or t == 0:
        return MatchResult([], list(range(n)))
    if t <= n:
        pred_of_target = kernels.linear_assignment(np.ascontiguousarray(c.T))
        pairs = sorted((int(p), j) for j, p in enumerate(pred_of_target))
    else:
        target_of_pred = kernels.linear_assignment(c)
        pairs = [(i, int(j)) for i, j in enumerate(target_of_pred)]
    used = {p for p, _ in pairs}
    return MatchResult(pairs, [i for i in range(n) if i not in used])


def _focal_class_cost(s: torch.Tensor, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA, eps=1e-8) -> torch.Tensor:
    pos = alpha * (1 - s) ** gamma * -(s + eps).log()
    neg = (1 - alpha) * s**gamma * -(1 - s + eps).log()
    return pos - neg


def matching_cost(
    output: DetectorOutput,
    queries: torch.Tensor,
    target_boxes: torch.Tensor,
    weights: LossWeights = LossWeights(),
    focal_cost: bool = False,
) -> torch.Tensor:
    """(M, T) cost: weighted class cost, L1 between decoded and target boxes, 1 - GIoU."""
    if output.box_params.ndim != 2:
        raise ValueError("matching_cost works on a single image's output")
    if target_boxes.ndim != 2 or target_boxes.shape[-1] != 4:
        raise ValueError(f"target boxes must be (T, 4), got {tuple(target_boxes.shape)}")
    with torch.no_grad():
        s = output.scores
        pred = decode_box_tensor(output.box_params, queries)
        tb = target_boxes.to(pred.dtype)
        cls = _focal_class_cost(s) if focal_cost else -s
        l1 = torch.cdist(pred, tb, p=1)
        g = giou_pairwise(pred, tb)
        return weights.focal * cls[:, None] + weights.l1 * l1 + weights.giou * (1 - g)


# ---------------------------------------------------------------- losses


def focal_loss(s: torch.Tensor, s_star: torch.Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA,
               reduction: str = "mean") -> torch.Tensor:
    """Focal loss on probabilities ``s`` in (0, 1) and binary targets."""
    s_star = s_star.to(s.dtype)
    p_t = s * s_star + (1 - s) * (1 - s_star)
    a_t = alpha * s_star + (1 - alpha) * (1 - s_star)
    loss = -a_t * (1 - p_t) ** gamma * torch.log(p_t)
    return _reduce(loss, reduction)


def sigmoid_focal_loss(logits: torch.Tensor, s_star: torch.Tensor, alpha: float = FOCAL_ALPHA,
                       gamma: float = FOCAL_GAMMA, reduction: str = "mean") -> torch.Tensor:
    s_star = s_star.to(logits.dtype)
    p = torch.sigmoid(logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, s_star, reduction="none")
    p_t = p * s_star + (1 - p) * (1 - s_star)
    a_t = alpha * s_star + (1 - alpha) * (1 - s_star)
    return _reduce(a_t * (1 - p_t) ** gamma * ce, reduction)


def l1_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Per-pair L1 norm over the four box coordinates, then reduced over pairs."""
    return _reduce((pred - target).abs().sum(-1), reduction)


def giou_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    return _reduce(1 - giou_paired(pred, target), reduction)


def laplace_nll_log_sigma(mu, target, log_sigma, reduction: str = "mean") -> torch.Tensor:
    per = 0.5 * ((mu - target).abs() * torch.exp(-log_sigma) + log_sigma).sum(-1)
    return _reduce(per, reduction)


def gaussian_nll_log_sigma(mu, target, log_sigma, reduction: str = "mean") -> torch.Tensor:
    per = 0.5 * ((mu - target) ** 2 * torch.exp(-2 * log_sigma) + 2 * log_sigma).sum(-1)
    return _reduce(per, reduction)


def _check_sigma(sigma: torch.Tensor) -> None:
    if torch.any(sigma <= 0):
        raise NonPositiveSigmaError("sigma must be > 0 in every coordinate")


def laplace_uncertainty_loss(mu, mu_tilde, sigma, reduction: str = "mean") -> torch.Tensor:
    """Half the summed ``|mu - mu_tilde| / sigma + log sigma`` over x, y, w, h; averaged over pairs."""
    _check_sigma(sigma)
    per = 0.5 * ((mu - mu_tilde).abs() / sigma + torch.log(sigma)).sum(-1)
    return _reduce(per, reduction)


def gaussian_uncertainty_loss(mu, mu_tilde, sigma, reduction: str = "mean") -> torch.Tensor:
    _check_sigma(sigma)
    per = 0.5 * ((mu - mu_tilde) ** 2 / sigma**2 + torch.log(sigma**2)).sum(-1)
    return _reduce(per, reduction)


def _reduce(x: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return x.mean() if x.numel() else x.sum()
    if reduction == "sum":
        return x.sum()
    if reduction == "none":
        return x
    raise ValueError(f"unknown reduction {reduction!r}")


def combined_loss(
    output: DetectorOutput,
    queries: torch.Tensor,
    target_boxes: torch.Tensor,
    weights: LossWeights = LossWeights(),
    mode: str = "stage2",
    uncertainty: str = "laplace",
    focal_cost: bool = False,
) -> LossReport:
    """Detection loss for one image, plus the weighted uncertainty term in stage 2.

    ``stage1`` pairs query k with target k and skips matching and
    uncertainty. ``stage2`` matches with the Hungarian solver; unmatched
    queries only receive the focal term against label 0. Focal, L1 and GIoU
    sums are normalized by the number of targets.
    """
    if mode not in ("stage1", "stage2"):
        raise ValueError(f"mode must be stage1 or stage2, got {mode!r}")
    if uncertainty not in UNCERTAINTY_KINDS:
        raise ValueError(f"uncertainty must be one of {UNCERTAINTY_KINDS}")
    m = output.logits.shape[-1]
    t = target_boxes.shape[0]
    target_boxes = target_boxes.to(output.box_params.dtype)
    if mode == "stage1":
        if m != t:
            raise ValueError(f"stage1 pairs queries with targets one-to-one; got {m} queries, {t} targets")
        match = MatchResult([(i, i) for i in range(t)], [])
    else:
        match = hungarian_match(matching_cost(output, queries, target_boxes, weights, focal_cost))
    pi = torch.as_tensor(match.pred_idx, dtype=torch.long)
    ti = torch.as_tensor(match.target_idx, dtype=torch.long)
    labels = torch.zeros(m, dtype=output.logits.dtype)
    labels[pi] = 1.0
    norm = float(max(t, 1))
    focal = sigmoid_focal_loss(output.logits, labels, reduction="sum") / norm
    decoded = decode_box_tensor(output.box_params[pi], queries[pi])
    tgt = target_boxes[ti]
    l1 = l1_loss(decoded, tgt, reduction="sum") / norm
    gl = giou_loss(decoded, tgt, reduction="sum") / norm
    total = weights.focal * focal + weights.l1 * l1 + weights.giou * gl
    terms = {"focal": focal.item(), "l1": l1.item(), "giou": gl.item()}
    if mode == "stage2" and uncertainty != "none":
        nll = laplace_nll_log_sigma if uncertainty == "laplace" else gaussian_nll_log_sigma
        unc = nll(decoded, tgt, output.log_sigma[pi], reduction="mean")
        total = total + weights.uncertainty * unc
        terms["uncertainty"] = unc.item()
    terms["total"] = total.item()
    return LossReport(total, terms, match)
