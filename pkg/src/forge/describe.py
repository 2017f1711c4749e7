"""Landmark descriptor with per-stage channel/spatial attention and multi-view attention regularization.

Every backbone stage is gated as ``x -> x * gamma -> x * sigma`` where ``gamma``
is a squeeze-excitation channel gate and ``sigma`` a 7x7-conv spatial gate.
The gates are projected into their own unit-norm metric spaces; the
regularizer pulls those projections together for two views of one landmark.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch import nn

from .detector import Backbone, as_batch


class NumericError(FloatingPointError):
    def __init__(self, stage: int):
        super().__init__(f"non-finite activations at stage {stage}")
        self.stage = stage


@dataclass
class MarsConfig:
    alpha_channel: float = 0.5
    alpha_spatial: float = 0.5
    tau: float = 0.2
    stages: tuple[int, ...] = (1, 2)
    crop_size: int = 64
    context: float = 1.5
    embed_dim: int = 64
    attn_dim: int = 32
    widths: tuple[int, int, int] = (16, 32, 64)
    reduction: int = 4

    def __post_init__(self):
        self.stages = tuple(int(s) for s in self.stages)
        self.widths = tuple(int(w) for w in self.widths)
        if self.alpha_channel < 0 or self.alpha_spatial < 0:
            raise ValueError("alphas must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if (self.alpha_channel > 0 or self.alpha_spatial > 0) and not self.stages:
            raise ValueError("stages must be non-empty when an alpha is positive")
        if any(s not in (0, 1, 2) for s in self.stages):
            raise ValueError("stages must be drawn from 0, 1, 2")
        if self.crop_size % 16:
            raise ValueError("crop_size must be a multiple of 16")

    @property
    def active(self) -> bool:
        return self.alpha_channel > 0 or self.alpha_spatial > 0


@dataclass
class AttentionState:
    channel: list[torch.Tensor]
    spatial: list[torch.Tensor]


@dataclass
class LandmarkEmbedding:
    z: torch.Tensor
    u: dict[int, torch.Tensor] = field(default_factory=dict)
    v: dict[int, torch.Tensor] = field(default_factory=dict)


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate: global average pool, bottleneck MLP, sigmoid."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc = nn.Sequential(nn.Linear(channels, hidden), nn.SiLU(), nn.Linear(hidden, channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc(x.mean(dim=(2, 3))))


class SpatialAttention(nn.Module):
    """Channel-wise mean and max maps, a 7x7 convolution, sigmoid."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        # replicate padding keeps the gate of a constant map constant up to the border
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, padding_mode="replicate")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([x.mean(1, keepdim=True), x.amax(1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled)).squeeze(1)


def channel_attention(block: ChannelAttention, feat: torch.Tensor) -> torch.Tensor:
    return block(feat)


def spatial_attention(block: SpatialAttention, feat: torch.Tensor) -> torch.Tensor:
    return block(feat)


class AttentionEmbedder(nn.Module):
    def __init__(self, channels: int, cells: int, dim: int = 32):
        super().__init__()
        self.channel_proj = nn.Linear(channels, dim, bias=False)
        self.spatial_proj = nn.Linear(cells, dim, bias=False)


class Descriptor(nn.Module):
    def __init__(self, cfg: MarsConfig | None = None):
        super().__init__()
        self.cfg = cfg or MarsConfig()
        widths = self.cfg.widths
        self.backbone = Backbone(widths)
        self.channel_att = nn.ModuleList(ChannelAttention(c, self.cfg.reduction) for c in widths)
        self.spatial_att = nn.ModuleList(SpatialAttention() for _ in widths)
        # pooled features share a large common offset; normalizing per batch removes it
        self.pool_norm = nn.BatchNorm1d(widths[-1])
        self.head = nn.Linear(widths[-1], self.cfg.embed_dim)
        sides = [self.cfg.crop_size // s for s in (4, 8, 16)]
        # one embedder per stage so the stage set can change without touching init order
        self.embedders = nn.ModuleList(
            AttentionEmbedder(c, side * side, self.cfg.attn_dim) for c, side in zip(widths, sides)
        )

    def forward(self, crops) -> tuple[LandmarkEmbedding, AttentionState]:
        return describe_forward(self, crops)


def standardize(x: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Per-crop zero mean and unit deviation; removes brightness and contrast offsets."""
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    std = x.std(dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (x - mean) / (std + eps)


def describe_forward(model: Descriptor, crops) -> tuple[LandmarkEmbedding, AttentionState]:
    """Embed a batch of 64x64 crops; returns the embeddings and the captured attention."""
    dtype = next(model.parameters()).dtype
    x = as_batch(crops, dtype)
    side = model.cfg.crop_size
    if x.shape[-2:] != (side, side):
        raise ValueError(f"crops must be {side}x{side}, got {tuple(x.shape[-2:])}")
    x = standardize(x)
    gammas, sigmas = [], []
    for i, stage in enumerate(model.backbone.stages):
        x = stage(x)
        gamma = model.channel_att[i](x)
        x = x * gamma[:, :, None, None]
        sigma = model.spatial_att[i](x)
        x = x * sigma[:, None]
        if not torch.isfinite(x).all():
            raise NumericError(i)
        gammas.append(gamma)
        sigmas.append(sigma)
    z = F.normalize(model.head(model.pool_norm(x.mean(dim=(2, 3)))), dim=1)
    state = AttentionState(gammas, sigmas)
    emb = LandmarkEmbedding(z)
    for s in model.cfg.stages:
        emb.u[s], emb.v[s] = embed_attention(model, state, s)
    return emb, state


def embed_attention(model: Descriptor, state: AttentionState, stage: int):
    """Unit-norm projections ``(u, v)`` of one stage's channel and spatial gates.

    The gates are mean-centred first, so the learned projection acts on the
    pattern of the gate and a uniform offset carries no signal.
    """
    if stage not in model.cfg.stages:
        raise KeyError(f"stage {stage} does not carry attention embeddings")
    emb = model.embedders[stage]
    gamma = state.channel[stage]
    sigma = state.spatial[stage].flatten(1)
    gamma = gamma - gamma.mean(1, keepdim=True)
    sigma = sigma - sigma.mean(1, keepdim=True)
    return F.normalize(emb.channel_proj(gamma), dim=1), F.normalize(emb.spatial_proj(sigma), dim=1)


# ----------------------------------------------------------------------------
# losses


def ntxent_loss(z_a: torch.Tensor, z_b: torch.Tensor, tau: float) -> torch.Tensor:
    """Normalized-temperature cross-entropy over the 2N embeddings of N positive pairs."""
    n = len(z_a)
    if n < 2:
        raise ValueError("ntxent_loss needs at least two pairs to have negatives")
    z = F.normalize(torch.cat([z_a, z_b], 0), dim=1)
    sim = (z @ z.T) / tau
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    partner = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, partner)


def mars_loss(emb_a: LandmarkEmbedding, emb_b: LandmarkEmbedding, cfg: MarsConfig) -> torch.Tensor:
    """Cosine distance between the two views' attention embeddings, summed over stages.

    For unit vectors ``1 - a.b == |a - b|^2 / 2``; the squared form is exactly
    zero for identical embeddings.
    """
    total = emb_a.z.new_zeros(len(emb_a.z))
    for s in cfg.stages:
        if cfg.alpha_channel:
            total = total + cfg.alpha_channel * 0.5 * (emb_a.u[s] - emb_b.u[s]).square().sum(1)
        if cfg.alpha_spatial:
            total = total + cfg.alpha_spatial * 0.5 * (emb_a.v[s] - emb_b.v[s]).square().sum(1)
    return total.mean()


def descriptor_total_loss(model: Descriptor, crops_a, crops_b, cfg: MarsConfig | None = None):
    """Contrastive loss plus the attention regularizer; returns ``(loss, report)``."""
    cfg = cfg or model.cfg
    emb_a, _ = describe_forward(model, crops_a)
    emb_b, _ = describe_forward(model, crops_b)
    base = ntxent_loss(emb_a.z, emb_b.z, cfg.tau)
    if cfg.active:
        mars = mars_loss(emb_a, emb_b, cfg)
        total = base + mars
    else:
        mars = base.new_zeros(())
        total = base
    return total, {"total": float(total.detach()), "ntxent": float(base.detach()), "mars": float(mars.detach())}


# ----------------------------------------------------------------------------
# evaluation helpers


def attention_consistency(map_a, map_b) -> float:
    """Cosine similarity of two spatial maps after mean-centering; 0 for a constant map."""
    a = np.asarray(torch.as_tensor(map_a).detach().double().flatten())
    b = np.asarray(torch.as_tensor(map_b).detach().double().flatten())
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def retrieval_eval(gallery_ids, gallery_z, query_ids=None, query_z=None, self_index=None, ks=(1, 5)):
    """Recall@k of cosine nearest-neighbour retrieval.

    Without explicit queries every gallery entry is queried against the rest
    (leave-one-out).  ``self_index[q]`` names a gallery entry to exclude for
    query ``q`` (``-1`` for none).
    """
    g = np.asarray(torch.as_tensor(gallery_z).detach().double())
    gid = np.asarray(gallery_ids)
    if len(g) == 0:
        raise ValueError("empty gallery")
    if query_z is None:
        q, qid = g, gid
        self_index = np.arange(len(g))
    else:
        q = np.asarray(torch.as_tensor(query_z).detach().double())
        qid = np.asarray(query_ids)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    sim = q @ g.T
    if self_index is not None:
        for row, col in enumerate(self_index):
            if col >= 0:
                sim[row, col] = -np.inf
    order = np.argsort(-sim, axis=1, kind="stable")
    out = {}
    for k in ks:
        hits = [qid[r] in gid[order[r, :k]][np.isfinite(sim[r, order[r, :k]])] for r in range(len(q))]
        out[f"recall@{k}"] = float(np.mean(hits)) if hits else 0.0
    return out


def extract_crop(image: np.ndarray, box, size: int = 64, context: float = 1.5) -> np.ndarray:
    """Square bilinear crop centred on ``box`` with side ``context * max(box side)``."""
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    side = context * max(box[2] - box[0], box[3] - box[1])
    t = (np.arange(size) + 0.5) / size - 0.5
    ys, xs = np.meshgrid(cy + t * side - 0.5, cx + t * side - 0.5, indexing="ij")
    return ndimage.map_coordinates(image, [ys, xs], order=1, mode="nearest")


def embed_crops(model: Descriptor, crops: Sequence[np.ndarray], batch_size: int = 128):
    """Evaluation-mode embeddings and attention states for many crops (no gradients)."""
    zs, spatial = [], [[] for _ in model.backbone.stages]
    if len(crops) == 0:
        return torch.zeros(0, model.cfg.embed_dim), [torch.zeros(0) for _ in spatial]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for i in range(0, len(crops), batch_size):
                emb, state = describe_forward(model, np.stack(crops[i : i + batch_size]))
                zs.append(emb.z)
                for s, m in enumerate(state.spatial):
                    spatial[s].append(m)
    finally:
        model.train(was_training)
    return torch.cat(zs), [torch.cat(m) for m in spatial]
