"""Seeded A/B comparison of config variants with median summaries and static plots."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import ConfigError, ExperimentConfig, config_hash, from_dict, to_dict  # noqa: E402
from .data import EVAL_STREAM, TRAIN_STREAM, crop_pairs, detection_sets  # noqa: E402
from .evaluate import evaluate  # noqa: E402
from .train import smoothed, train_descriptor, train_detector  # noqa: E402

log = logging.getLogger(__name__)

# named variant sets for the two directional checks
PRESETS: dict[str, dict[str, dict]] = {
    "uda": {
        "source_only": {"ablation.adapt_enabled": False},
        "uda": {"ablation.adapt_enabled": True},
    },
    "mars": {
        "baseline": {"ablation.mars_enabled": False},
        "mars": {"ablation.mars_enabled": True},
    },
}
PRESET_KIND = {"uda": "detector", "mars": "descriptor"}


def apply_overrides(cfg: ExperimentConfig, overrides: Mapping[str, object]) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-path fields replaced; unknown paths are a ConfigError."""
    data = to_dict(cfg)
    for path, value in overrides.items():
        node = data
        *parents, leaf = path.split(".")
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section in override {path!r}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config field in override {path!r}")
        node[leaf] = value
    return from_dict(ExperimentConfig, data)


class _DataCache:
    """Shares rendered datasets between variants that only differ in training settings."""

    def __init__(self):
        self._det: dict[str, tuple] = {}
        self._pairs: dict[str, tuple] = {}

    def detection(self, cfg: ExperimentConfig, seed: int):
        key = json.dumps([seed, to_dict(cfg.datagen), to_dict(cfg.evaluation)], sort_keys=True)
        if key not in self._det:
            self._det[key] = detection_sets(cfg, seed)
        return self._det[key]

    def pairs(self, cfg: ExperimentConfig, seed: int):
        key = json.dumps([seed, to_dict(cfg.pairs), to_dict(cfg.datagen), cfg.mars.crop_size, cfg.mars.context])
        if key not in self._pairs:
            self._pairs[key] = (
                crop_pairs(cfg, seed, TRAIN_STREAM, cfg.pairs.train_worlds),
                crop_pairs(cfg, seed, EVAL_STREAM, cfg.pairs.eval_worlds),
            )
        return self._pairs[key]


def run_variant(cfg: ExperimentConfig, kind: str, cache: _DataCache | None = None):
    """Train and evaluate one configuration; returns ``(record, model)``.

    The record holds the metrics and the training loss curve.
    """
    cache = cache or _DataCache()
    if kind == "detector":
        seed = cfg.optimizer.seed
        data = cache.detection(cfg, seed)
        report, model = train_detector(cfg, data=data)
        metrics = evaluate(cfg, detector=model, data=data).metrics
        curve = [r["supervised"] for r in report.records]
    elif kind == "descriptor":
        seed = cfg.descriptor_optimizer.seed
        train_pairs, held = cache.pairs(cfg, seed)
        report, model = train_descriptor(cfg, pairs=train_pairs)
        metrics = evaluate(cfg, descriptor=model, pairs=held).metrics
        curve = [r["ntxent"] for r in report.records]
    else:
        raise ValueError(f"unknown experiment kind {kind!r}")
    return {"seed": seed, "metrics": metrics, "loss": curve, "wall_clock": report.wall_clock}, model


def ab_compare(
    cfg: ExperimentConfig,
    variants: Mapping[str, Mapping[str, object]],
    kind: str,
    seed: int = 0,
    num_seeds: int = 3,
    out_dir: str | Path | None = None,
) -> dict:
    """Run every variant at seeds ``seed .. seed+num_seeds-1`` and summarize.

    Medians are taken per metric over seeds; deltas are each variant's median
    minus the first variant's.  With ``out_dir`` the per-run records, the
    summary and two plots are written there.  The returned summary also
    carries every run record and the trained models.
    """
    if not variants:
        raise ValueError("ab_compare needs at least one variant")
    names = list(variants)
    seeds = [seed + i for i in range(num_seeds)]
    cache = _DataCache()
    runs: dict[str, list[dict]] = {n: [] for n in names}
    models: dict[str, list] = {n: [] for n in names}
    for s in seeds:
        for name in names:
            vcfg = apply_overrides(cfg.with_seed(s), variants[name])
            log.info("ab: variant %s seed %d", name, s)
            res, model = run_variant(vcfg, kind, cache)
            res["variant"] = name
            res["config_hash"] = config_hash(vcfg)
            runs[name].append(res)
            models[name].append(model)

    medians = {}
    for name in names:
        keys = runs[name][0]["metrics"].keys()
        medians[name] = {k: float(np.median([r["metrics"][k] for r in runs[name]])) for k in keys}
    ref = medians[names[0]]
    deltas = {n: {k: medians[n][k] - ref[k] for k in ref if k in medians[n]} for n in names[1:]}
    summary = {"kind": kind, "seeds": seeds, "variants": {n: dict(variants[n]) for n in names},
               "medians": medians, "deltas": deltas}

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ab_runs.jsonl", "w", encoding="utf-8") as fh:
            for name in names:
                for r in runs[name]:
                    fh.write(json.dumps(r) + "\n")
        (out / "ab_summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")
        plot_loss_curves(runs, out / "loss_curves.png")
        plot_metrics(medians, out / "metrics.png")
    summary["runs"] = runs
    summary["models"] = models
    return summary


def plot_loss_curves(runs: Mapping[str, list[dict]], path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, (name, rs) in enumerate(runs.items()):
        for j, r in enumerate(rs):
            if r["loss"]:
                ax.plot(smoothed(r["loss"]), color=f"C{i}", alpha=0.8, label=name if j == 0 else None)
    ax.set_xlabel("step")
    ax.set_ylabel("training loss (25-step mean)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_metrics(medians: Mapping[str, Mapping[str, float]], path: Path) -> None:
    names = list(medians)
    keys = [k for k in medians[names[0]] if not k.startswith("tracking_identity")]
    x = np.arange(len(keys))
    width = 0.8 / len(names)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(keys)), 4))
    for i, name in enumerate(names):
        ax.bar(x + i * width, [medians[name][k] for k in keys], width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2)
    ax.set_xticklabels(keys, rotation=40, ha="right", fontsize=7)
    ax.set_ylabel("median over seeds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
