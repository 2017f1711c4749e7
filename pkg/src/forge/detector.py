"""Tiny one-stage grid detector: conv backbone, per-cell head, decoding, and the supervised loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datagen import NUM_CLASSES, SOURCE, SceneSample

STRIDES = (4, 8, 16)
HEAD_STRIDE = STRIDES[-1]


@dataclass
class DetectorConfig:
    widths: tuple[int, int, int] = (16, 32, 64)
    anchor: float = 32.0
    w_box: float = 5.0
    w_obj: float = 1.0
    w_cls: float = 1.0
    conf_threshold: float = 0.3
    nms_iou: float = 0.5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError("widths must be three positive channel counts")
        if self.anchor <= 0:
            raise ValueError("anchor must be positive")
        if min(self.w_box, self.w_obj, self.w_cls) < 0:
            raise ValueError("loss weights must be non-negative")
        if not (0 <= self.conf_threshold <= 1 and 0 <= self.nms_iou <= 1):
            raise ValueError("conf_threshold and nms_iou must lie in [0, 1]")


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int


OBJ_PRIOR_LOGIT = -4.0


def init_conv_(module: nn.Module) -> None:
    """He-normal weights and zero biases; keeps activations from shrinking through the stack."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def conv_block(c_in: int, c_out: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride, 1), nn.SiLU())


class Backbone(nn.Module):
    """Six 3x3 conv blocks in three stages at strides 4, 8 and 16."""

    def __init__(self, widths: Sequence[int] = (16, 32, 64), in_channels: int = 1):
        super().__init__()
        w0, w1, w2 = widths
        self.widths = tuple(widths)
        self.stages = nn.ModuleList(
            [
                nn.Sequential(conv_block(in_channels, w0, 2), conv_block(w0, w0, 2)),
                nn.Sequential(conv_block(w0, w1, 2), conv_block(w1, w1, 1)),
                nn.Sequential(conv_block(w1, w2, 2), conv_block(w2, w2, 1)),
            ]
        )
        init_conv_(self)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        # inputs live in [0, 1]; centre them without any per-image statistics
        x = x - 0.5
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class DetectHead(nn.Module):
    def __init__(self, channels: int = 64, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.num_outputs = 5 + num_classes
        self.net = nn.Sequential(
            nn.Conv2d(channels, channels, 1), nn.SiLU(), nn.Conv2d(channels, self.num_outputs, 1)
        )
        init_conv_(self)
        with torch.no_grad():
            out = self.net[-1]
            out.weight.mul_(0.1)
            out.bias[4] = OBJ_PRIOR_LOGIT

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        # (B, 5+K, S, S) -> (B, S, S, 5+K)
        return self.net(feat).permute(0, 2, 3, 1)


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig | None = None):
        super().__init__()
        self.cfg = cfg or DetectorConfig()
        self.backbone = Backbone(self.cfg.widths)
        self.head = DetectHead(self.cfg.widths[-1])

    def forward(self, images: torch.Tensor) -> tuple[list[torch.Tensor], torch.Tensor]:
        feats = backbone_forward(self.backbone, images)
        return feats, self.head(feats[-1])


def as_batch(images, dtype=None) -> torch.Tensor:
    """Coerce an (H,W), (B,H,W) or (B,1,H,W) array/tensor into a (B,1,H,W) tensor."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if dtype is not None:
        x = x.to(dtype)
    elif not x.is_floating_point():
        x = x.float()
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"expected an image batch, got shape {tuple(x.shape)}")
    return x


def backbone_forward(backbone: Backbone, images) -> list[torch.Tensor]:
    p = next(backbone.parameters())
    x = as_batch(images, p.dtype)
    h, w = x.shape[-2:]
    if h % 16 or w % 16:
        raise ValueError(f"input size must be a multiple of 16, got {h}x{w}")
    return backbone(x)


def detect_head(head: DetectHead, feat: torch.Tensor) -> torch.Tensor:
    return head(feat)


# ----------------------------------------------------------------------------
# boxes


def iou(a, b) -> float:
    aw, ah = a[2] - a[0], a[3] - a[1]
    bw, bh = b[2] - b[0], b[3] - b[1]
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (aw * ah + bw * bh - inter))


def nms(boxes: Sequence, scores: Sequence[float], iou_threshold: float) -> list[int]:
    """Greedy suppression; returns kept indices in descending score order.

    A box is dropped when its IoU with an already-kept box exceeds the threshold.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep: list[int] = []
    for i in order:
        if all(iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(int(i))
    return keep


def _logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def encode_box(box, stride: float = HEAD_STRIDE, anchor: float = 32.0, grid_size: int | None = None):
    """Responsible cell ``(row, col)`` and regression targets ``(tx, ty, tw, th)`` for a box."""
    cx, cy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    col, row = int(np.floor(cx / stride)), int(np.floor(cy / stride))
    if grid_size is not None:
        col, row = min(max(col, 0), grid_size - 1), min(max(row, 0), grid_size - 1)
    eps = 1e-12
    fx = float(np.clip(cx / stride - col, eps, 1 - eps))
    fy = float(np.clip(cy / stride - row, eps, 1 - eps))
    tw = float(np.log((box[2] - box[0]) / anchor))
    th = float(np.log((box[3] - box[1]) / anchor))
    return row, col, (_logit(fx), _logit(fy), tw, th)


def decode_cell(row: int, col: int, t, stride: float = HEAD_STRIDE, anchor: float = 32.0):
    tx, ty, tw, th = (float(v) for v in t)
    cx = (col + 1.0 / (1.0 + np.exp(-tx))) * stride
    cy = (row + 1.0 / (1.0 + np.exp(-ty))) * stride
    w, h = anchor * np.exp(tw), anchor * np.exp(th)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _as_numpy_grid(grid) -> np.ndarray:
    if torch.is_tensor(grid):
        grid = grid.detach().cpu().double().numpy()
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 4:
        if grid.shape[0] != 1:
            raise ValueError("decode takes a single grid; iterate over the batch")
        grid = grid[0]
    return grid


def decode(
    grid,
    conf_threshold: float = 0.3,
    nms_iou: float = 0.5,
    stride: float = HEAD_STRIDE,
    anchor: float = 32.0,
    image_size: tuple[int, int] | None = None,
) -> list[Detection]:
    """Turn one S x S x (5+K) grid into scored, per-class NMS-filtered detections."""
    if not (0 <= conf_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("conf_threshold and nms_iou must lie in [0, 1]")
    g = _as_numpy_grid(grid)
    s = g.shape[0]
    if image_size is None:
        image_size = (int(s * stride), int(s * stride))
    h, w = image_size
    obj = 1.0 / (1.0 + np.exp(-g[..., 4]))
    logits = g[..., 5:]
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    cls = probs.argmax(-1)
    scores = obj * probs.max(-1)

    cands: list[Detection] = []
    for row, col in zip(*np.nonzero(scores >= conf_threshold)):
        x0, y0, x1, y1 = decode_cell(row, col, g[row, col, :4], stride, anchor)
        x0, y0 = max(x0, 0.0), max(y0, 0.0)
        x1, y1 = min(x1, float(w)), min(y1, float(h))
        if x1 <= x0 or y1 <= y0:
            continue
        cands.append(Detection((x0, y0, x1, y1), float(scores[row, col]), int(cls[row, col])))

    kept: list[Detection] = []
    for c in sorted({d.class_id for d in cands}):
        group = [d for d in cands if d.class_id == c]
        kept.extend(group[i] for i in nms([d.box for d in group], [d.score for d in group], nms_iou))
    kept.sort(key=lambda d: -d.score)
    return kept


# ----------------------------------------------------------------------------
# supervised loss


def build_targets(truth: SceneSample, grid_size: int, stride: float = HEAD_STRIDE, anchor: float = 32.0):
    """Per-cell targets for one source sample.

    Returns ``(mask, box_targets, class_targets, collisions)`` where the box
    targets are ``(frac_x, frac_y, log(w/anchor), log(h/anchor))``.  When two
    centres land in one cell the larger box wins and the event is counted.
    """
    mask = np.zeros((grid_size, grid_size), dtype=bool)
    area = np.zeros((grid_size, grid_size))
    box_t = np.zeros((grid_size, grid_size, 4))
    cls_t = np.zeros((grid_size, grid_size), dtype=np.int64)
    collisions = 0
    for box, c in zip(truth.boxes, truth.class_ids):
        row, col, (tx, ty, tw, th) = encode_box(box, stride, anchor, grid_size)
        a = (box[2] - box[0]) * (box[3] - box[1])
        if mask[row, col]:
            collisions += 1
            if a <= area[row, col]:
                continue
        mask[row, col] = True
        area[row, col] = a
        box_t[row, col] = (1 / (1 + np.exp(-tx)), 1 / (1 + np.exp(-ty)), tw, th)
        cls_t[row, col] = c
    return mask, box_t, cls_t, collisions


def supervised_loss_terms(grid: torch.Tensor, truths, cfg: DetectorConfig | None = None):
    """Weighted supervised loss and its per-term breakdown, averaged over the batch."""
    cfg = cfg or DetectorConfig()
    if isinstance(truths, SceneSample):
        truths = [truths]
    if grid.ndim == 3:
        grid = grid[None]
    if grid.shape[0] != len(truths):
        raise ValueError("grid batch and truth list differ in length")
    b, s = grid.shape[0], grid.shape[1]
    masks, boxes, classes, collisions = [], [], [], 0
    for t in truths:
        if t.domain != SOURCE:
            raise ValueError("supervised loss only accepts source-domain samples")
        m, bt, ct, n = build_targets(t, s, HEAD_STRIDE, cfg.anchor)
        masks.append(m)
        boxes.append(bt)
        classes.append(ct)
        collisions += n
    mask = torch.as_tensor(np.stack(masks))
    box_t = torch.as_tensor(np.stack(boxes), dtype=grid.dtype)
    cls_t = torch.as_tensor(np.stack(classes))

    obj = F.binary_cross_entropy_with_logits(grid[..., 4], mask.to(grid.dtype), reduction="sum")
    if mask.any():
        pred = grid[mask]
        tgt = box_t[mask]
        box_pred = torch.cat([torch.sigmoid(pred[:, :2]), pred[:, 2:4]], dim=1)
        box = (box_pred - tgt).square().sum()
        cls = F.cross_entropy(pred[:, 5:], cls_t[mask], reduction="sum")
    else:
        box = grid.new_zeros(())
        cls = grid.new_zeros(())
    total = (cfg.w_box * box + cfg.w_obj * obj + cfg.w_cls * cls) / b
    terms = {
        "box": float(box.detach()) / b,
        "obj": float(obj.detach()) / b,
        "cls": float(cls.detach()) / b,
        "collisions": collisions,
    }
    return total, terms


def supervised_loss(grid: torch.Tensor, truths, cfg: DetectorConfig | None = None) -> torch.Tensor:
    return supervised_loss_terms(grid, truths, cfg)[0]
