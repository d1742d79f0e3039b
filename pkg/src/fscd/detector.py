"""Point-query encoder-decoder transformer with score, box and uncertainty heads."""
from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from fscd.features import (
    BackboneConfig,
    ExemplarAggregation,
    build_backbone,
    pool_exemplars,
    run_backbone,
    sample_points,
)
from fscd.geometry import Box

ANCHOR_KINDS = ("exemplar-centers", "dot-annotations", "fixed-grid", "learnable")
CHECKPOINT_SCHEMA = "fscd-checkpoint/1"
LOG_SIGMA_RANGE = (-5.0, 5.0)
MIN_SIZE = 1e-4


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    feature_dim: int = 256
    num_heads: int = 8
    num_queries: int = 600
    anchor_kind: str = "fixed-grid"
    ffn_dim: int = 1024
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.num_encoder_layers < 1 or self.num_decoder_layers < 1:
            raise ValueError("encoder and decoder need at least one layer each")
        if self.feature_dim % self.num_heads:
            raise ValueError(f"feature_dim {self.feature_dim} not divisible by num_heads {self.num_heads}")
        if self.feature_dim % 4:
            raise ValueError("feature_dim must be a multiple of 4 for the 2-D sine encoding")
        if self.anchor_kind not in ("fixed-grid", "learnable"):
            raise ValueError(f"anchor_kind must be fixed-grid or learnable, got {self.anchor_kind!r}")
        if self.num_queries < 1:
            raise ValueError("num_queries must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig("resnet50", 16, 256))
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self) -> None:
        if self.backbone.feature_dim != self.detector.feature_dim:
            raise ValueError("backbone feature_dim must equal detector feature_dim")

    def to_dict(self) -> dict:
        return {"backbone": asdict(self.backbone), "detector": asdict(self.detector)}

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(BackboneConfig(**d["backbone"]), DetectorConfig(**d["detector"]))


def paper_model_config(num_queries: int = 600, pretrained: bool = False) -> ModelConfig:
    """ResNet-50 with a light pyramid fusion at stride 16 and the six-layer transformer."""
    return ModelConfig(BackboneConfig("resnet50", 16, 256, pretrained=pretrained), DetectorConfig(num_queries=num_queries))


def desk_model_config(num_queries: int = 100, **overrides) -> ModelConfig:
    """The small configuration used for single-CPU synthetic runs."""
    dim = overrides.pop("feature_dim", 96)
    det = dict(
        num_encoder_layers=2,
        num_decoder_layers=2,
        feature_dim=dim,
        num_heads=4,
        num_queries=num_queries,
        ffn_dim=4 * dim,
    )
    det.update(overrides)
    return ModelConfig(BackboneConfig("tiny", 8, dim), DetectorConfig(**det))


@dataclass
class QueryPoints:
    points: np.ndarray
    kind: str

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.kind not in ANCHOR_KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if len(self.points) and (self.points.min() < 0 or self.points.max() > 1):
            raise ValueError("query points must lie in [0, 1]^2")

    def __len__(self) -> int:
        return len(self.points)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.points, dtype=dtype)


@dataclass
class DetectorOutput:
    """Per-query outputs; every field has shape ``(..., M)`` or ``(..., M, 4)``.

    ``aux`` holds the same heads applied after each earlier decoder layer when
    the forward pass was asked for them.
    """

    logits: torch.Tensor
    box_params: torch.Tensor
    log_sigma: torch.Tensor
    aux: list[DetectorOutput] = field(default_factory=list)

    @property
    def scores(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(self.log_sigma)

    def __len__(self) -> int:
        return self.logits.shape[-1]

    def select(self, i: int) -> DetectorOutput:
        return DetectorOutput(self.logits[i], self.box_params[i], self.log_sigma[i], [a.select(i) for a in self.aux])


def lattice_shape(m: int) -> tuple[int, int]:
    """(rows, cols) with rows the divisor of ``m`` nearest sqrt(m); ties take the smaller."""
    if m < 1:
        raise ValueError("M must be >= 1")
    root = math.sqrt(m)
    divisors = [d for d in range(1, m + 1) if m % d == 0]
    r = min(divisors, key=lambda d: (abs(d - root), d))
    return r, m // r


def make_anchor_points(m: int, kind: str = "fixed-grid") -> QueryPoints:
    """Cell centers of a rows x cols lattice, row-major (y outer, x inner)."""
    if kind not in ("fixed-grid", "learnable"):
        raise ValueError(f"anchor kind must be fixed-grid or learnable, got {kind!r}")
    r, c = lattice_shape(m)
    ys = (np.arange(r) + 0.5) / r
    xs = (np.arange(c) + 0.5) / c
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return QueryPoints(np.stack([gx.ravel(), gy.ravel()], axis=1), kind)


def sine_encoding(points: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """(..., 2) normalized points -> (..., dim); half the channels per axis, sin/cos interleaved."""
    half = dim // 2
    scale = 2 * math.pi
    idx = torch.arange(half // 2, dtype=points.dtype, device=points.device)
    freq = temperature ** (2 * idx / half)
    out = []
    for axis in (1, 0):  # y then x, DETR order
        v = points[..., axis : axis + 1] * scale / freq
        out.append(torch.stack([v.sin(), v.cos()], dim=-1).flatten(-2))
    return torch.cat(out, dim=-1)


def grid_positions(h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) / h
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) / w
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1).reshape(h * w, 2)


class MLP(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, num_layers: int):
        super().__init__()
        dims = [in_dim] + [hidden] * (num_layers - 1) + [out_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class EncoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn, dropout):
        super().__init__()
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, pos):
        q = x + pos
        x = self.norm1(x + self.drop(self.attn(q, q, x, need_weights=False)[0]))
        return self.norm2(x + self.drop(self.ffn(x)))


class DecoderLayer(nn.Module):
    def __init__(self, dim, heads, ffn, dropout):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, tgt, qpos, memory, mpos):
        q = tgt + qpos
        tgt = self.norm1(tgt + self.drop(self.self_attn(q, q, tgt, need_weights=False)[0]))
        tgt = self.norm2(
            tgt + self.drop(self.cross_attn(tgt + qpos, memory + mpos, memory, need_weights=False)[0])
        )
        return self.norm3(tgt + self.drop(self.ffn(tgt)))


class PointQueryTransformer(nn.Module):
    """Encoder over the aggregated map, decoder over query points, three heads.

    Box head outputs (dx, dy, w, h): the offset of the box center from the
    query point in normalized units, and a sigmoid-squashed size. Each query
    starts from the learned pattern vector plus the encoded map sampled at
    its point; cross-attention then mixes in the whole map.
    """

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.feature_dim
        self.encoder = nn.ModuleList(
            EncoderLayer(d, cfg.num_heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.num_encoder_layers)
        )
        self.decoder = nn.ModuleList(
            DecoderLayer(d, cfg.num_heads, cfg.ffn_dim, cfg.dropout) for _ in range(cfg.num_decoder_layers)
        )
        self.query_pos = MLP(d, d, d, 2)
        self.pattern = nn.Parameter(torch.zeros(d))
        self.score_head = nn.Linear(d, 1)
        self.box_head = MLP(d, d, 4, 3)
        self.sigma_head = MLP(d, d, 4, 2)
        nn.init.normal_(self.pattern, std=0.02)
        nn.init.constant_(self.score_head.bias, -math.log((1 - 0.01) / 0.01))
        last = self.box_head.layers[-1]
        nn.init.zeros_(last.weight)
        with torch.no_grad():
            last.bias.copy_(torch.tensor([0.0, 0.0, -2.0, -2.0]))
        nn.init.zeros_(self.sigma_head.layers[-1].weight)
        nn.init.zeros_(self.sigma_head.layers[-1].bias)

    def heads(self, tgt: torch.Tensor) -> DetectorOutput:
        logits = self.score_head(tgt)[..., 0]
        raw = self.box_head(tgt)
        box = torch.cat([raw[..., :2], torch.sigmoid(raw[..., 2:]).clamp_min(MIN_SIZE)], dim=-1)
        log_sigma = self.sigma_head(tgt).clamp(*LOG_SIGMA_RANGE)
        return DetectorOutput(logits, box, log_sigma)

    def forward(self, fa: torch.Tensor, queries: torch.Tensor, aux: bool = False) -> DetectorOutput:
        """``fa`` (B, D, H, W), ``queries`` (B, M, 2) -> batched :class:`DetectorOutput`."""
        b, d, h, w = fa.shape
        if d != self.cfg.feature_dim:
            raise ValueError(f"aggregated map has D={d}, detector expects {self.cfg.feature_dim}")
        if queries.ndim != 3 or queries.shape[0] != b or queries.shape[-1] != 2:
            raise ValueError(f"queries must be (B, M, 2) with B={b}, got {tuple(queries.shape)}")
        m = queries.shape[1]
        if m == 0:
            z = fa.new_zeros((b, 0))
            return DetectorOutput(z, fa.new_zeros((b, 0, 4)), fa.new_zeros((b, 0, 4)))
        memory = fa.flatten(2).transpose(1, 2)
        mpos = sine_encoding(grid_positions(h, w, fa.device, fa.dtype), d)[None]
        for layer in self.encoder:
            memory = layer(memory, mpos)
        qpos = self.query_pos(sine_encoding(queries.to(fa.dtype), d))
        q = queries.to(fa.dtype)
        local = sample_points(memory.transpose(1, 2).reshape(b, d, h, w), q)
        tgt = self.pattern + local
        intermediate = []
        for layer in self.decoder:
            tgt = layer(tgt, qpos, memory, mpos)
            intermediate.append(tgt)
        out = self.heads(tgt)
        if aux:
            out.aux = [self.heads(t) for t in intermediate[:-1]]
        return out


def decode_box_tensor(box_params: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
    """(…, M, 4) params + (…, M, 2) query points -> (…, M, 4) cxcywh with centers clamped to [0, 1]."""
    center = (queries + box_params[..., :2]).clamp(0.0, 1.0)
    return torch.cat([center, box_params[..., 2:]], dim=-1)


def encode_box_tensor(boxes: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
    return torch.cat([boxes[..., :2] - queries, boxes[..., 2:]], dim=-1)


def decode_boxes(output: DetectorOutput, queries: QueryPoints) -> list[Box]:
    if len(output) != len(queries):
        raise ValueError(f"{len(output)} outputs for {len(queries)} queries")
    q = queries.tensor(output.box_params.dtype)
    arr = decode_box_tensor(output.box_params.detach(), q).cpu().numpy().astype(np.float64)
    return [Box.from_array(row) for row in arr]


def encode_targets(boxes: Sequence[Box], queries: QueryPoints) -> np.ndarray:
    arr = np.array([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=np.float64).reshape(-1, 4)
    arr[:, :2] -= queries.points
    return arr


class FewShotDetector(nn.Module):
    """Backbone, exemplar aggregation and the point-query transformer in one module."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg.backbone)
        self.aggregation = ExemplarAggregation(cfg.detector.feature_dim)
        self.transformer = PointQueryTransformer(cfg.detector)
        lattice = torch.as_tensor(make_anchor_points(cfg.detector.num_queries).points, dtype=torch.float32)
        if cfg.detector.anchor_kind == "learnable":
            self.anchors = nn.Parameter(lattice)
        else:
            self.register_buffer("anchors", lattice)

    def anchor_queries(self, batch: int) -> torch.Tensor:
        return self.anchors.clamp(0.0, 1.0)[None].expand(batch, -1, -1)

    def encode(self, images: torch.Tensor, exemplar_centers: torch.Tensor, exemplar_mask=None) -> torch.Tensor:
        fmap = run_backbone(self.backbone, images)
        f_b = pool_exemplars(fmap, exemplar_centers, exemplar_mask)
        return self.aggregation(fmap, f_b)

    def forward(
        self,
        images: torch.Tensor,
        exemplar_centers: torch.Tensor,
        queries: torch.Tensor | None = None,
        exemplar_mask: torch.Tensor | None = None,
        aux: bool = False,
    ) -> DetectorOutput:
        fa = self.encode(images, exemplar_centers, exemplar_mask)
        if queries is None:
            queries = self.anchor_queries(images.shape[0])
        return self.transformer(fa, queries, aux=aux)

    def parameter_groups(self, lr_backbone: float, lr_rest: float, weight_decay: float = 1e-4):
        bb = [p for p in self.backbone.parameters() if p.requires_grad]
        bb_ids = {id(p) for p in bb}
        rest = [p for p in self.parameters() if p.requires_grad and id(p) not in bb_ids]
        return [
            {"params": bb, "lr": lr_backbone, "weight_decay": weight_decay},
            {"params": rest, "lr": lr_rest, "weight_decay": weight_decay},
        ]


def save_checkpoint(model: FewShotDetector, path: str | Path, **meta) -> None:
    torch.save(
        {
            "schema": CHECKPOINT_SCHEMA,
            "model_config": model.cfg.to_dict(),
            "state_dict": model.state_dict(),
            "meta": meta,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> tuple[FewShotDetector, dict]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    blob = torch.load(p, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"{p} is not an {CHECKPOINT_SCHEMA} checkpoint")
    model = FewShotDetector(ModelConfig.from_dict(blob["model_config"]))
    model.load_state_dict(blob["state_dict"])
    return model, blob.get("meta", {})
