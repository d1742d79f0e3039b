"""Backbones, exemplar feature pooling and exemplar-conditioned aggregation.

Tensors are channel-first (``B, D, H, W``) inside the model. The
:class:`FeatureMap` / :class:`AggregatedMap` wrappers expose the
channel-last ``H x W x D`` view used by the per-image API.
"""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from fscd.geometry import Box

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MAX_SIDE = 1024


class ImageTooSmallError(ValueError):
    pass


class CenterOutsideMapError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "tiny"
    stride: int = 8
    feature_dim: int = 64
    bias: bool = True
    pretrained: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("tiny", "resnet50"):
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "tiny" and self.stride not in (4, 8, 16, 32):
            raise ValueError("tiny backbone stride must be one of 4, 8, 16, 32")
        if self.kind == "resnet50" and self.stride not in (16, 32):
            raise ValueError("resnet50 backbone stride must be 16 (FPN-fused) or 32 (layer 4 only)")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")


@dataclass
class FeatureMap:
    values: torch.Tensor  # H x W x D
    stride: int

    def __post_init__(self) -> None:
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"feature map must be HxWxD with positive sizes, got {tuple(self.values.shape)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


@dataclass
class ExemplarFeature:
    values: torch.Tensor  # D


@dataclass
class AggregatedMap:
    values: torch.Tensor  # H x W x D


class TinyBackbone(nn.Module):
    """Small conv stack: a stride-4 stem block, then one stride-2 block per extra octave."""

    def __init__(self, stride: int = 8, feature_dim: int = 64, bias: bool = True):
        super().__init__()
        self.stride = stride
        self.out_dim = feature_dim
        width = max(feature_dim // 2, 8)
        layers: list[nn.Module] = [
            nn.Conv2d(3, width, 4, stride=4, bias=bias),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, padding=1, bias=bias),
            nn.ReLU(inplace=True),
        ]
        c = width
        for _ in range(int(math.log2(stride // 4))):
            layers += [
                nn.Conv2d(c, feature_dim, 3, stride=2, padding=1, bias=bias),
                nn.ReLU(inplace=True),
                nn.Conv2d(feature_dim, feature_dim, 3, padding=1, bias=bias),
                nn.ReLU(inplace=True),
            ]
            c = feature_dim
        if c != feature_dim:
            layers.append(nn.Conv2d(c, feature_dim, 1, bias=bias))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class ResNet50Backbone(nn.Module):
    """ResNet-50 with frozen batch norm, layer-4 features, optional layer-3/4 fusion.

    ``stride=16`` fuses layer 3 and an upsampled layer 4 (a two-level FPN);
    ``stride=32`` projects layer 4 alone.
    """

    def __init__(self, stride: int = 16, feature_dim: int = 256, pretrained: bool = False):
        super().__init__()
        from torchvision.models import ResNet50_Weights, resnet50
        from torchvision.ops import FrozenBatchNorm2d

        weights = ResNet50_Weights.IMAGENET1K_V1 if pretrained else None
        net = resnet50(weights=weights, norm_layer=FrozenBatchNorm2d)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2)
        self.layer3 = net.layer3
        self.layer4 = net.layer4
        self.stride = stride
        self.out_dim = feature_dim
        self.lateral4 = nn.Conv2d(2048, feature_dim, 1)
        if stride == 16:
            self.lateral3 = nn.Conv2d(1024, feature_dim, 1)
            self.smooth = nn.Conv2d(feature_dim, feature_dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        c3 = self.layer3(self.stem(x))
        p4 = self.lateral4(self.layer4(c3))
        if self.stride == 32:
            return p4
        p3 = self.lateral3(c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        return self.smooth(p3)


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "tiny":
        return TinyBackbone(cfg.stride, cfg.feature_dim, cfg.bias)
    return ResNet50Backbone(cfg.stride, cfg.feature_dim, cfg.pretrained)


def run_backbone(backbone: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Pad ``x`` (B, 3, H, W) to a stride multiple so the map is ceil(H/stride) x ceil(W/stride)."""
    s = backbone.stride
    h, w = x.shape[-2:]
    if h < s or w < s:
        raise ImageTooSmallError(f"image {h}x{w} is smaller than the backbone stride {s}")
    ph, pw = (-h) % s, (-w) % s
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    out = backbone(x)
    return out[..., : math.ceil(h / s), : math.ceil(w / s)]


def preprocess_image(image: np.ndarray, max_side: int = MAX_SIDE) -> torch.Tensor:
    """uint8 HxWx3 -> normalized float 3xHxW, downscaled so the longer side is <= ``max_side``."""
    x = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1).div_(255.0)
    h, w = x.shape[-2:]
    if max(h, w) > max_side:
        scale = max_side / max(h, w)
        size = (max(1, round(h * scale)), max(1, round(w * scale)))
        x = F.interpolate(x[None], size=size, mode="bilinear", align_corners=False)[0]
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def sample_points(fmap: torch.Tensor, points: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Sample ``fmap`` (B, D, H, W) at normalized points (B, K, 2) -> (B, K, D).

    Cell (i, j) covers [j/W, (j+1)/W) x [i/H, (i+1)/H); its center is the
    sample location of that cell's value.
    """
    if mode == "nearest":
        b, d, h, w = fmap.shape
        col = (points[..., 0] * w).floor().long().clamp(0, w - 1)
        row = (points[..., 1] * h).floor().long().clamp(0, h - 1)
        flat = fmap.flatten(2)  # B, D, HW
        idx = (row * w + col)[:, None, :].expand(-1, d, -1)
        return flat.gather(2, idx).transpose(1, 2)
    if mode != "bilinear":
        raise ValueError(f"unknown sampling mode {mode!r}")
    grid = (points * 2.0 - 1.0)[:, :, None, :]  # B, K, 1, 2
    out = F.grid_sample(fmap, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[..., 0].transpose(1, 2)


def pool_exemplars(
    fmap: torch.Tensor,
    centers: torch.Tensor,
    mask: torch.Tensor | None = None,
    mode: str = "bilinear",
) -> torch.Tensor:
    """Mean of the features at the exemplar centers: (B, D, H, W), (B, K, 2) -> (B, D).

    ``mask`` (B, K) marks real exemplars when images carry fewer than K.
    """
    if centers.numel() and (centers.min() < 0 or centers.max() > 1):
        raise CenterOutsideMapError("exemplar center falls outside the feature map")
    feats = sample_points(fmap, centers, mode)
    if mask is None:
        return feats.mean(dim=1)
    m = mask.to(feats.dtype)[..., None]
    return (feats * m).sum(1) / m.sum(1).clamp_min(1.0)


def aggregate_maps(fmap: torch.Tensor, f_b: torch.Tensor, w_proj: torch.Tensor) -> torch.Tensor:
    """1x1 projection of ``[F; F * f_b]``: (B, D, H, W), (B, D), (2D, D) -> (B, D, H, W)."""
    d = fmap.shape[1]
    if f_b.shape[-1] != d or tuple(w_proj.shape) != (2 * d, d):
        raise ValueError(
            f"dimension mismatch: map D={d}, exemplar D={f_b.shape[-1]}, W_proj {tuple(w_proj.shape)}"
        )
    cat = torch.cat([fmap, fmap * f_b[:, :, None, None]], dim=1)
    return torch.einsum("bchw,cd->bdhw", cat, w_proj)


class ExemplarAggregation(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.w_proj = nn.Parameter(torch.empty(2 * dim, dim))
        nn.init.xavier_uniform_(self.w_proj)

    def forward(self, fmap: torch.Tensor, f_b: torch.Tensor) -> torch.Tensor:
        return aggregate_maps(fmap, f_b, self.w_proj)


# ---------------------------------------------------------------- per-image API


@torch.no_grad()
def extract_feature_map(image: np.ndarray | torch.Tensor, backbone: nn.Module, normalize: bool = True) -> FeatureMap:
    """Run ``backbone`` on one image (HxWx3 array, or an already preprocessed 3xHxW tensor)."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
        x = preprocess_image(image) if normalize else torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
    else:
        x = image
    was_training = backbone.training
    backbone.eval()
    try:
        out = run_backbone(backbone, x[None])[0]
    finally:
        backbone.train(was_training)
    return FeatureMap(out.permute(1, 2, 0).contiguous(), backbone.stride)


def extract_exemplar_feature(fmap: FeatureMap, exemplars: Sequence[Box], mode: str = "bilinear") -> ExemplarFeature:
    if len(exemplars) == 0:
        raise ValueError("at least one exemplar is required")
    centers = torch.tensor([[b.cx, b.cy] for b in exemplars], dtype=fmap.values.dtype)
    chw = fmap.values.permute(2, 0, 1)[None]
    return ExemplarFeature(pool_exemplars(chw, centers[None], mode=mode)[0])


def aggregate(fmap: FeatureMap, f_b: ExemplarFeature, w_proj: torch.Tensor) -> AggregatedMap:
    chw = fmap.values.permute(2, 0, 1)[None]
    w = torch.as_tensor(w_proj, dtype=fmap.values.dtype)
    out = aggregate_maps(chw, f_b.values[None], w)[0]
    return AggregatedMap(out.permute(1, 2, 0))
