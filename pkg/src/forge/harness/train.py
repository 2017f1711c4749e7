"""Seeded SGD training loops for the adapted detector and the attention-regularized descriptor."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..adapt import AdaptBatch, AdaptModel, total_adapt_loss
from ..checkpoint import save_checkpoint
from ..describe import Descriptor, MarsConfig, descriptor_total_loss
from ..detector import supervised_loss_terms
from .config import ExperimentConfig, config_hash
from .data import EVAL_STREAM, TRAIN_STREAM, crop_pairs, detection_sets

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunReport:
    kind: str
    seed: int
    config_hash: str
    records: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def deterministic_torch() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def build_adapt_model(cfg: ExperimentConfig, seed: int) -> AdaptModel:
    torch.manual_seed(seed)
    return AdaptModel(cfg.detector, cfg.adapt)


def effective_mars(cfg: ExperimentConfig) -> MarsConfig:
    if cfg.ablation.mars_enabled:
        return cfg.mars
    return dataclasses.replace(cfg.mars, alpha_channel=0.0, alpha_spatial=0.0)


def build_descriptor(cfg: ExperimentConfig, seed: int) -> Descriptor:
    torch.manual_seed(seed)
    return Descriptor(effective_mars(cfg))


def _write_records(records: list[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _sgd(model, opt_cfg):
    return torch.optim.SGD(model.parameters(), lr=opt_cfg.learning_rate, momentum=opt_cfg.momentum)


def _clip(model, opt_cfg) -> None:
    # bounds the occasional gradient spike of the unnormalized backbone
    if opt_cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), opt_cfg.grad_clip)


def _finish(model, report: RunReport, out_dir: Path | None, kind: str, records_name: str):
    if out_dir is not None:
        report.checkpoint = str(save_checkpoint(model, out_dir / "checkpoint", {"kind": kind}))
        _write_records(report.records, out_dir / records_name)
        report.save(out_dir / "report.json")


def _guard(loss: torch.Tensor, step: int, model, last_good, out_dir: Path | None, kind: str):
    if torch.isfinite(loss):
        return
    if out_dir is not None:
        model.load_state_dict(last_good)
        save_checkpoint(model, out_dir / "checkpoint", {"kind": kind, "diverged_at": step})
    raise TrainingDiverged(f"non-finite loss at step {step}")


def train_detector(cfg: ExperimentConfig, out_dir: str | Path | None = None, data=None):
    """Train the detector with the adaptation objective (or supervised-only when disabled).

    Returns ``(report, model)``.  ``data`` may carry pre-rendered
    ``(train_src, train_tgt, ...)`` sets to skip regeneration.
    """
    deterministic_torch()
    t0 = time.perf_counter()
    oc = cfg.optimizer
    seed = oc.seed
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_src, train_tgt = (data or detection_sets(cfg, seed))[:2]
    if not train_src:
        raise ValueError("detector training needs source samples")
    adapt_on = cfg.ablation.adapt_enabled
    if adapt_on and not train_tgt:
        raise ValueError("adaptation needs target samples")

    model = build_adapt_model(cfg, seed)
    opt = _sgd(model, oc)
    rng_src = np.random.default_rng([seed, TRAIN_STREAM, 1])
    rng_tgt = np.random.default_rng([seed, TRAIN_STREAM, 2])
    bs_src = min(oc.batch_size, len(train_src))
    report = RunReport("detector", seed, config_hash(cfg))
    last_good = copy.deepcopy(model.state_dict())

    for step in range(oc.steps):
        src = [train_src[i] for i in rng_src.choice(len(train_src), bs_src, replace=False)]
        if adapt_on:
            tidx = rng_tgt.choice(len(train_tgt), min(oc.batch_size, len(train_tgt)), replace=False)
            batch = AdaptBatch.from_samples(src, [train_tgt[i] for i in tidx])
            lam = cfg.adapt.lambda_at(step, oc.steps)
            ramp = cfg.adapt.ramp_at(step, oc.steps)
            loss, rec = total_adapt_loss(model, batch, cfg.adapt, lam, ramp)
        else:
            images = torch.as_tensor(np.stack([s.image for s in src])[:, None], dtype=torch.float32)
            _, grid = model.detector(images)
            loss, terms = supervised_loss_terms(grid, src, cfg.detector)
            rec = {"total": float(loss.detach()), "supervised": float(loss.detach()), "collisions": terms["collisions"]}
        _guard(loss, step, model, last_good, out, "detector")
        last_good = copy.deepcopy(model.state_dict())
        opt.zero_grad()
        loss.backward()
        _clip(model, oc)
        opt.step()
        report.records.append({"step": step, **rec})
        if out is not None and oc.checkpoint_every and (step + 1) % oc.checkpoint_every == 0:
            save_checkpoint(model, out / "checkpoints" / f"step_{step + 1:06d}", {"kind": "detector"})
        if step % 100 == 0:
            log.info("detector step %d loss %.4f", step, rec["total"])
    report.wall_clock = time.perf_counter() - t0
    _finish(model, report, out, "detector", "detector_steps.jsonl")
    return report, model


def train_descriptor(cfg: ExperimentConfig, out_dir: str | Path | None = None, pairs=None):
    """Contrastive training on view-pair crops with the attention regularizer when enabled."""
    deterministic_torch()
    t0 = time.perf_counter()
    oc = cfg.descriptor_optimizer
    seed = oc.seed
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        pairs = crop_pairs(cfg, seed, TRAIN_STREAM, cfg.pairs.train_worlds)
    mcfg = effective_mars(cfg)
    model = build_descriptor(cfg, seed)
    opt = _sgd(model, oc)
    rng = np.random.default_rng([seed, TRAIN_STREAM, 3])
    report = RunReport("descriptor", seed, config_hash(cfg))
    bs = min(oc.batch_size, len(pairs.ids))
    if oc.steps and bs < 2:
        raise ValueError("descriptor training needs at least two crop pairs")
    last_good = copy.deepcopy(model.state_dict())
    for step in range(oc.steps):
        idx = rng.choice(len(pairs.ids), bs, replace=False)
        a = torch.as_tensor(pairs.crops_a[idx][:, None], dtype=torch.float32)
        b = torch.as_tensor(pairs.crops_b[idx][:, None], dtype=torch.float32)
        loss, rec = descriptor_total_loss(model, a, b, mcfg)
        _guard(loss, step, model, last_good, out, "descriptor")
        last_good = copy.deepcopy(model.state_dict())
        opt.zero_grad()
        loss.backward()
        _clip(model, oc)
        opt.step()
        report.records.append({"step": step, **rec})
        if out is not None and oc.checkpoint_every and (step + 1) % oc.checkpoint_every == 0:
            save_checkpoint(model, out / "checkpoints" / f"step_{step + 1:06d}", {"kind": "descriptor"})
        if step % 100 == 0:
            log.info("descriptor step %d loss %.4f", step, rec["total"])
    report.wall_clock = time.perf_counter() - t0
    _finish(model, report, out, "descriptor", "descriptor_steps.jsonl")
    return report, model


def smoothed(values, window: int = 25) -> np.ndarray:
    """Trailing mean over ``window`` steps (shorter at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def held_out_pairs(cfg: ExperimentConfig, seed: int):
    return crop_pairs(cfg, seed, EVAL_STREAM, cfg.pairs.eval_worlds)
