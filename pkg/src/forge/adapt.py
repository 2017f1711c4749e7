"""Unsupervised domain adaptation for the grid detector.

Global alignment trains a domain classifier on pooled backbone features through
a gradient reversal layer.  Local alignment works on instance features pooled
inside boxes (ground truth for source, the model's own detections for target):
moment matching between domains, objectness-ranked selection, visual-similarity
clustering, a cluster-contrastive loss and an instance-level adversarial loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .datagen import SOURCE, TARGET, SceneSample
from .detector import HEAD_STRIDE, Detector, DetectorConfig, decode, supervised_loss_terms


@dataclass
class AdaptConfig:
    lambda_grl: float = 1.0
    w_global: float = 1.0
    w_reg: float = 0.1
    w_vsa_adv: float = 0.5
    w_vsa_con: float = 0.5
    top_k: int = 16
    sim_threshold: float = 0.7
    temperature: float = 0.1
    warmup_fraction: float = 0.3
    target_conf: float = 0.3
    classifier_hidden: int = 32
    unit_classifier_input: bool = True

    def __post_init__(self):
        if self.lambda_grl < 0:
            raise ValueError("lambda_grl must be non-negative")
        if min(self.w_global, self.w_reg, self.w_vsa_adv, self.w_vsa_con) < 0:
            raise ValueError("adaptation weights must be non-negative")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not -1 <= self.sim_threshold <= 1:
            raise ValueError("sim_threshold must lie in [-1, 1]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 <= self.warmup_fraction <= 1:
            raise ValueError("warmup_fraction must lie in [0, 1]")

    def ramp_at(self, step: int, total_steps: int) -> float:
        """Linear 0 -> 1 warm-up factor over the first ``warmup_fraction`` of training."""
        ramp = self.warmup_fraction * total_steps
        if ramp <= 0:
            return 1.0
        return min(1.0, step / ramp)

    def lambda_at(self, step: int, total_steps: int) -> float:
        """Reversal strength at ``step`` under the warm-up."""
        return self.lambda_grl * self.ramp_at(step, total_steps)


@dataclass
class InstanceFeature:
    vector: torch.Tensor
    sample_index: int
    box: tuple[float, float, float, float]
    objectness: float
    domain: str

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError("objectness must lie in [0, 1]")


@dataclass
class ClusterAssignment:
    labels: list[int] = field(default_factory=list)
    num_clusters: int = 0


# ----------------------------------------------------------------------------
# adversarial pieces


class GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lambda_grl):
        ctx.lambda_grl = lambda_grl
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambda_grl, None


def grl(x: torch.Tensor, lambda_grl: float) -> torch.Tensor:
    return GradReverse.apply(x, float(lambda_grl))


class DomainClassifier(nn.Module):
    """Two-layer MLP returning the logit of "target".

    With ``unit_input`` the feature is L2-normalized first, so the reversed gradient
    cannot win the domain game by inflating the backbone's feature scale.
    """

    def __init__(self, in_dim: int, hidden: int = 32, unit_input: bool = False):
        super().__init__()
        self.unit_input = unit_input
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.unit_input:
            x = F.normalize(x, dim=-1, eps=1e-8)
        return self.net(x).squeeze(-1)

    def zero_(self) -> "DomainClassifier":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def domain_classifier(clf: DomainClassifier, x: torch.Tensor) -> torch.Tensor:
    """Probability that each feature vector comes from the target domain."""
    return torch.sigmoid(clf(x))


def _domain_bce(clf: DomainClassifier, src: torch.Tensor, tgt: torch.Tensor, lambda_grl: float):
    x = grl(torch.cat([src, tgt], 0), lambda_grl)
    labels = torch.cat([src.new_zeros(len(src)), tgt.new_ones(len(tgt))])
    return F.binary_cross_entropy_with_logits(clf(x), labels)


def global_align_loss(src_feat: torch.Tensor, tgt_feat: torch.Tensor, clf: DomainClassifier,
                      lambda_grl: float) -> torch.Tensor:
    """Domain BCE over spatially averaged deepest feature maps (source=0, target=1)."""
    if len(src_feat) == 0 or len(tgt_feat) == 0:
        raise ValueError("global alignment needs at least one sample from each domain")
    return _domain_bce(clf, src_feat.mean(dim=(2, 3)), tgt_feat.mean(dim=(2, 3)), lambda_grl)


# ----------------------------------------------------------------------------
# instance features


def pool_instances(
    feat: torch.Tensor,
    boxes: Sequence,
    scores: Sequence[float] | None = None,
    domain: str = SOURCE,
    sample_index: int = 0,
    stride: float = HEAD_STRIDE,
) -> list[InstanceFeature]:
    """Average a (C, h, w) feature map over the cells whose centres fall inside each box.

    A box that contains no cell centre pools the single cell under its centre.
    Missing scores mean ground truth (objectness 1).
    """
    _, h, w = feat.shape
    out = []
    for k, box in enumerate(boxes):
        x0 = max(int(np.ceil(box[0] / stride - 0.5)), 0)
        x1 = min(int(np.floor(box[2] / stride - 0.5)), w - 1)
        y0 = max(int(np.ceil(box[1] / stride - 0.5)), 0)
        y1 = min(int(np.floor(box[3] / stride - 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            cx = min(max(int((box[0] + box[2]) / 2 // stride), 0), w - 1)
            cy = min(max(int((box[1] + box[3]) / 2 // stride), 0), h - 1)
            x0 = x1 = cx
            y0 = y1 = cy
        vec = feat[:, y0 : y1 + 1, x0 : x1 + 1].mean(dim=(1, 2))
        obj = 1.0 if scores is None else float(scores[k])
        out.append(InstanceFeature(vec, sample_index, tuple(float(v) for v in box), obj, domain))
    return out


def select_features(instances: Sequence[InstanceFeature], top_k: int) -> list[InstanceFeature]:
    """Keep the ``top_k`` highest-objectness instances per domain, in input order."""
    keep: set[int] = set()
    for dom in (SOURCE, TARGET):
        idx = [i for i, f in enumerate(instances) if f.domain == dom]
        idx.sort(key=lambda i: -instances[i].objectness)  # stable: ties keep input order
        keep.update(idx[:top_k])
    return [f for i, f in enumerate(instances) if i in keep]


def _stack(instances) -> torch.Tensor:
    if torch.is_tensor(instances):
        return instances
    return torch.stack([f.vector for f in instances]) if len(instances) else torch.zeros(0, 0)


def feature_regularize(src, tgt, eps: float = 1e-8) -> torch.Tensor:
    """Squared distance between per-channel means plus between per-channel standard deviations.

    Returns zero when either side is empty; the caller records the skip.
    """
    a, b = _stack(src), _stack(tgt)
    if len(a) == 0 or len(b) == 0:
        return torch.zeros((), dtype=a.dtype if len(a) else b.dtype)
    mean_a, mean_b = a.mean(0), b.mean(0)
    std_a = (a.var(0, unbiased=False) + eps).sqrt()
    std_b = (b.var(0, unbiased=False) + eps).sqrt()
    return (mean_a - mean_b).square().sum() + (std_a - std_b).square().sum()


def vsa_cluster(instances, sim_threshold: float) -> ClusterAssignment:
    """Average-linkage agglomerative clustering under cosine similarity.

    The most similar pair of clusters is merged until no pair reaches
    ``sim_threshold``; ties go to the pair with the smallest member indices.
    Labels are numbered in order of each cluster's first member.
    """
    x = _stack(instances)
    x = x.detach().cpu().double().numpy() if torch.is_tensor(x) else np.asarray(x, dtype=np.float64)
    n = len(x)
    if n == 0:
        return ClusterAssignment([], 0)
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    link = np.clip(x @ x.T, -1.0, 1.0)
    size = np.ones(n)
    owner = np.arange(n)
    active = list(range(n))
    while len(active) > 1:
        sub = link[np.ix_(active, active)]
        iu = np.triu_indices(len(active), 1)
        vals = sub[iu]
        best = int(np.argmax(vals))  # first maximum in row-major order
        if vals[best] < sim_threshold:
            break
        a, b = active[iu[0][best]], active[iu[1][best]]
        merged = (size[a] * link[a] + size[b] * link[b]) / (size[a] + size[b])
        link[a, :] = merged
        link[:, a] = merged
        size[a] += size[b]
        owner[owner == b] = a
        active.remove(b)
    labels, remap = [], {}
    for i in range(n):
        remap.setdefault(owner[i], len(remap))
        labels.append(remap[owner[i]])
    return ClusterAssignment(labels, len(remap))


def vsa_contrastive_loss(instances, assignment, temperature: float) -> torch.Tensor:
    """Supervised-contrastive loss with cluster ids standing in for class labels.

    Anchors without a same-cluster partner are ignored; fewer than two
    instances (or no positive pair at all) give zero.
    """
    x = _stack(instances)
    labels = assignment.labels if isinstance(assignment, ClusterAssignment) else list(assignment)
    n = len(x)
    if n < 2:
        return torch.zeros((), dtype=x.dtype)
    z = F.normalize(x, dim=1)
    sim = z @ z.T / temperature
    eye = torch.eye(n, dtype=torch.bool)
    lab = torch.as_tensor(labels)
    pos = (lab[:, None] == lab[None, :]) & ~eye
    count = pos.sum(1)
    has = count > 0
    if not has.any():
        return torch.zeros((), dtype=x.dtype)
    log_den = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1, keepdim=True)
    log_prob = (sim - log_den).masked_fill(~pos, 0.0)
    per_anchor = -log_prob.sum(1)[has] / count[has]
    return per_anchor.mean()


def vsa_adversarial_loss(selected, clf: DomainClassifier, lambda_grl: float) -> torch.Tensor:
    """Instance-level domain BCE through the reversal layer; zero if a domain is missing."""
    src = [f.vector for f in selected if f.domain == SOURCE]
    tgt = [f.vector for f in selected if f.domain == TARGET]
    if not src or not tgt:
        dtype = selected[0].vector.dtype if selected else torch.get_default_dtype()
        return torch.zeros((), dtype=dtype)
    return _domain_bce(clf, torch.stack(src), torch.stack(tgt), lambda_grl)


# ----------------------------------------------------------------------------
# combined objective


class AdaptModel(nn.Module):
    """Detector plus the global and instance-level domain classifiers."""

    def __init__(self, det_cfg: DetectorConfig | None = None, adapt_cfg: AdaptConfig | None = None):
        super().__init__()
        det_cfg = det_cfg or DetectorConfig()
        adapt_cfg = adapt_cfg or AdaptConfig()
        self.detector = Detector(det_cfg)
        c = det_cfg.widths[-1]
        self.global_clf = DomainClassifier(c, adapt_cfg.classifier_hidden, adapt_cfg.unit_classifier_input)
        self.instance_clf = DomainClassifier(c, adapt_cfg.classifier_hidden, adapt_cfg.unit_classifier_input)


@dataclass
class AdaptBatch:
    """Labeled source samples and bare target images; target ground truth is not representable."""

    source: list[SceneSample]
    target_images: list[np.ndarray]

    @classmethod
    def from_samples(cls, source: Sequence[SceneSample], target: Sequence[SceneSample]) -> "AdaptBatch":
        return cls(list(source), [t.image for t in target])


def _images(batch_images, dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack(batch_images)[:, None], dtype=dtype)


def _scalar(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def total_adapt_loss(
    model: AdaptModel,
    batch: AdaptBatch,
    cfg: AdaptConfig,
    lambda_grl: float | None = None,
    ramp: float = 1.0,
):
    """Supervised loss on source plus the weighted adaptation terms.

    ``ramp`` scales the weights of the two non-adversarial local terms (moment
    regularizer, cluster contrast), which the reversal warm-up does not reach.
    Returns ``(loss, report)``; the report holds every term's value, the skip
    flags of the local terms and the cluster count.
    """
    if not batch.target_images:
        raise ValueError("adaptation needs a non-empty target batch")
    if not batch.source:
        raise ValueError("adaptation needs a non-empty source batch")
    lam = cfg.lambda_grl if lambda_grl is None else lambda_grl
    det = model.detector
    dtype = next(det.parameters()).dtype
    src_feats, src_grid = det(_images([s.image for s in batch.source], dtype))
    sup, sup_terms = supervised_loss_terms(src_grid, batch.source, det.cfg)

    tgt_feats, tgt_grid = det(_images(batch.target_images, dtype))
    glob = global_align_loss(src_feats[-1], tgt_feats[-1], model.global_clf, lam)

    instances: list[InstanceFeature] = []
    for i, s in enumerate(batch.source):
        instances += pool_instances(src_feats[-1][i], s.boxes, None, SOURCE, i)
    size = tuple(batch.target_images[0].shape)
    for i in range(len(batch.target_images)):
        dets = decode(tgt_grid[i], cfg.target_conf, det.cfg.nms_iou, HEAD_STRIDE, det.cfg.anchor, size)
        instances += pool_instances(
            tgt_feats[-1][i], [d.box for d in dets], [d.score for d in dets], TARGET, i
        )
    selected = select_features(instances, cfg.top_k)
    src_sel = [f for f in selected if f.domain == SOURCE]
    tgt_sel = [f for f in selected if f.domain == TARGET]
    both = bool(src_sel) and bool(tgt_sel)

    reg = feature_regularize(src_sel, tgt_sel)
    adv = vsa_adversarial_loss(selected, model.instance_clf, lam)
    assignment = vsa_cluster(selected, cfg.sim_threshold)
    con = vsa_contrastive_loss(selected, assignment, cfg.temperature)

    total = sup
    weighted = ((cfg.w_global, glob), (cfg.w_reg * ramp, reg), (cfg.w_vsa_adv, adv), (cfg.w_vsa_con * ramp, con))
    for w, term in weighted:
        if w != 0:
            total = total + w * term
    report = {
        "total": _scalar(total),
        "supervised": _scalar(sup),
        "global": _scalar(glob),
        "regularize": _scalar(reg),
        "vsa_adv": _scalar(adv),
        "vsa_con": _scalar(con),
        "skipped_regularize": not both,
        "skipped_vsa_adv": not both,
        "skipped_vsa_con": len(selected) < 2,
        "num_clusters": assignment.num_clusters,
        "num_target_instances": len(tgt_sel),
        "collisions": sup_terms["collisions"],
        "lambda_grl": lam,
    }
    return total, report
