"""Read-only evaluation of trained checkpoints."""

from __future__ import annotations

import time
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..adapt import AdaptModel
from ..checkpoint import load_checkpoint
from ..datagen import SceneSample
from ..describe import Descriptor, attention_consistency, embed_crops, extract_crop, retrieval_eval
from ..detector import Detection, Detector, decode, iou
from ..track import Tracker, oracle_detections, tracking_metrics
from .config import ExperimentConfig, config_hash
from .data import crop_pairs, detection_sets, tracking_sequence, EVAL_STREAM
from .train import RunReport, build_adapt_model, build_descriptor, deterministic_torch


def detect_batch(detector: Detector, images: Sequence[np.ndarray], conf: float, nms_iou: float,
                 batch_size: int = 32) -> list[list[Detection]]:
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(np.stack(images[i : i + batch_size])[:, None], dtype=torch.float32)
            _, grid = detector(x)
            size = tuple(images[i].shape)
            for g in grid:
                out.append(decode(g, conf, nms_iou, anchor=detector.cfg.anchor, image_size=size))
    return out


def match_counts(dets: Sequence[Detection], truth: SceneSample, iou_threshold: float = 0.5,
                 class_aware: bool = True) -> tuple[int, int, int]:
    """Greedy score-ordered matching; returns (true positives, #detections, #ground truth)."""
    used = set()
    tp = 0
    for d in sorted(dets, key=lambda d: -d.score):
        best, best_j = iou_threshold, -1
        for j, (box, c) in enumerate(zip(truth.boxes, truth.class_ids)):
            if j in used or (class_aware and c != d.class_id):
                continue
            v = iou(d.box, box)
            if v >= best:
                best, best_j = v, j
        if best_j >= 0:
            used.add(best_j)
            tp += 1
    return tp, len(dets), len(truth.boxes)


def detection_metrics(all_dets, samples, iou_threshold=0.5, class_aware=True) -> dict:
    tp = nd = ng = 0
    for dets, s in zip(all_dets, samples):
        a, b, c = match_counts(dets, s, iou_threshold, class_aware)
        tp, nd, ng = tp + a, nd + b, ng + c
    return {"recall": tp / ng if ng else 1.0, "precision": tp / nd if nd else 1.0}


def evaluate_detector(detector: Detector, samples, cfg: ExperimentConfig) -> dict:
    ec = cfg.evaluation
    dets = detect_batch(detector, [s.image for s in samples], ec.conf_threshold, cfg.detector.nms_iou)
    return detection_metrics(dets, samples, ec.iou_threshold, ec.class_aware)


def evaluate_descriptor(model: Descriptor, pairs, stages: Sequence[int] | None = None) -> dict:
    """Leave-one-out retrieval over both views and mean positive-pair attention consistency."""
    if len(pairs.ids) == 0:
        raise ValueError("no held-out pairs")
    n = len(pairs.ids)
    z, spatial = embed_crops(model, list(pairs.crops_a) + list(pairs.crops_b))
    ids = np.concatenate([pairs.ids, pairs.ids])
    metrics = retrieval_eval(ids, z)
    stages = list(model.cfg.stages if stages is None else stages)
    per_stage = {}
    for s in range(len(spatial)):
        scores = [attention_consistency(spatial[s][i], spatial[s][n + i]) for i in range(n)]
        per_stage[s] = float(np.mean(scores))
        metrics[f"attention_consistency_stage{s}"] = per_stage[s]
    metrics["mean_attention_consistency"] = float(np.mean([per_stage[s] for s in stages])) if stages else 0.0
    return metrics


def descriptor_embed_fn(model: Descriptor):
    cfg = model.cfg

    def embed(image, detections):
        crops = [extract_crop(image, d.box, cfg.crop_size, cfg.context) for d in detections]
        return embed_crops(model, crops)[0].double().numpy()

    return embed


def random_embed_fn(dim: int, seed: int):
    rng = np.random.default_rng(seed)

    def embed(image, detections):
        return rng.normal(size=(len(detections), dim))

    return embed


def run_sequence(frames, cfg: ExperimentConfig, embed, detector: Detector | None = None) -> dict:
    """Track one sequence (oracle detections when no detector is given) and score it."""
    detect = None
    if detector is not None:
        ec = cfg.evaluation

        def detect(image):
            return detect_batch(detector, [image], ec.conf_threshold, cfg.detector.nms_iou)[0]

    tracker = Tracker(cfg.track, embed, detect)
    for f in frames:
        tracker.step(f, oracle_detections(f) if detector is None else None)
    return tracking_metrics(tracker.records)


def evaluate_tracking(model: Descriptor, cfg: ExperimentConfig, seed: int, static: bool = False,
                      detector: Detector | None = None) -> dict:
    totals = {"identity_switches": 0, "match_precision": [], "match_recall": []}
    for k in range(cfg.evaluation.sequences):
        frames = tracking_sequence(cfg, seed, k, static)
        m = run_sequence(frames, cfg, descriptor_embed_fn(model), detector)
        totals["identity_switches"] += m["identity_switches"]
        totals["match_precision"].append(m["match_precision"])
        totals["match_recall"].append(m["match_recall"])
    return {
        "identity_switches": totals["identity_switches"],
        "match_precision": float(np.mean(totals["match_precision"])) if totals["match_precision"] else 1.0,
        "match_recall": float(np.mean(totals["match_recall"])) if totals["match_recall"] else 1.0,
    }


def load_models(cfg: ExperimentConfig, detector_ckpt=None, descriptor_ckpt=None):
    seed = cfg.optimizer.seed
    det = desc = None
    if detector_ckpt is not None:
        if not Path(detector_ckpt).exists():
            raise FileNotFoundError(f"missing detector checkpoint {detector_ckpt}")
        det = build_adapt_model(cfg, seed)
        load_checkpoint(det, detector_ckpt)
    if descriptor_ckpt is not None:
        if not Path(descriptor_ckpt).exists():
            raise FileNotFoundError(f"missing descriptor checkpoint {descriptor_ckpt}")
        desc = build_descriptor(cfg, seed)
        load_checkpoint(desc, descriptor_ckpt)
    return det, desc


def evaluate(cfg: ExperimentConfig, detector: AdaptModel | None = None, descriptor: Descriptor | None = None,
             data=None, pairs=None) -> RunReport:
    """Metrics for whichever models are given; parameters are never updated."""
    deterministic_torch()
    if detector is None and descriptor is None:
        raise ValueError("evaluate needs at least one model")
    t0 = time.perf_counter()
    seed = cfg.optimizer.seed
    metrics: dict = {}
    if detector is not None:
        detector.eval()
        _, _, eval_src, eval_tgt = data or detection_sets(cfg, seed)
        src = evaluate_detector(detector.detector, eval_src, cfg)
        tgt = evaluate_detector(detector.detector, eval_tgt, cfg)
        metrics.update(
            {
                "source_recall@IoU0.5": src["recall"],
                "source_precision@IoU0.5": src["precision"],
                "target_recall@IoU0.5": tgt["recall"],
                "target_precision@IoU0.5": tgt["precision"],
            }
        )
    if descriptor is not None:
        descriptor.eval()
        dseed = cfg.descriptor_optimizer.seed
        held = pairs if pairs is not None else crop_pairs(cfg, dseed, EVAL_STREAM, cfg.pairs.eval_worlds)
        metrics.update(evaluate_descriptor(descriptor, held))
        metrics.update({f"tracking_{k}": v for k, v in evaluate_tracking(descriptor, cfg, dseed).items()})
    return RunReport("evaluation", seed, config_hash(cfg), [], metrics, time.perf_counter() - t0)
