"""Command-line entry point: ``forge <verb> [--config PATH] [--seed N] [--out DIR] ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .datagen import build_dataset, load_manifest, write_manifest
from .harness.ab import PRESET_KIND, PRESETS, ab_compare
from .harness.config import ExperimentConfig, load_config, save_config
from .harness.data import EVAL_STREAM, crop_pairs, tracking_sequence
from .harness.evaluate import descriptor_embed_fn, detect_batch, evaluate, load_models, random_embed_fn
from .harness.train import train_descriptor, train_detector
from .track import Tracker, oracle_detections, tracking_metrics

log = logging.getLogger("forge")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record) + "\n")


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_datagen(args, cfg: ExperimentConfig) -> dict:
    out = _out(args)
    save_config(cfg, out / "config.yaml")
    seed = cfg.optimizer.seed
    if args.sequence:
        frames = tracking_sequence(cfg, seed, args.sequence_index, static=args.static)
        manifest = write_manifest(frames, out)
        return {"manifest": str(manifest), "frames": len(frames)}
    manifest = build_dataset(cfg.datagen, seed, out)
    return {"manifest": str(manifest), "samples": cfg.datagen.n_source + cfg.datagen.n_target}


def cmd_train_detector(args, cfg: ExperimentConfig) -> dict:
    out = _out(args)
    save_config(cfg, out / "config.yaml")
    report, _ = train_detector(cfg, out)
    return {"checkpoint": report.checkpoint, "steps": len(report.records), "wall_clock": report.wall_clock}


def cmd_train_descriptor(args, cfg: ExperimentConfig) -> dict:
    out = _out(args)
    save_config(cfg, out / "config.yaml")
    report, _ = train_descriptor(cfg, out)
    return {"checkpoint": report.checkpoint, "steps": len(report.records), "wall_clock": report.wall_clock}


def cmd_eval(args, cfg: ExperimentConfig) -> dict:
    det, desc = load_models(cfg, args.detector, args.descriptor)
    report = evaluate(cfg, det, desc)
    out = _out(args)
    report.save(out / "report.json")
    _write_jsonl(out / "metrics.jsonl", [report.metrics])
    return report.metrics


def cmd_track(args, cfg: ExperimentConfig) -> dict:
    det, desc = load_models(cfg, args.detector, args.descriptor)
    if desc is None and not args.random_embeddings:
        raise ValueError("track needs --descriptor or --random-embeddings")
    frames = load_manifest(args.sequence)
    embed = random_embed_fn(cfg.mars.embed_dim, cfg.optimizer.seed) if desc is None else descriptor_embed_fn(desc.eval())
    detect = None
    if det is not None:
        det.eval()

        def detect(image):
            return detect_batch(det.detector, [image], cfg.evaluation.conf_threshold, cfg.detector.nms_iou)[0]

    tracker = Tracker(cfg.track, embed, detect)
    for f in frames:
        tracker.step(f, None if det is not None else oracle_detections(f))
    metrics = tracking_metrics(tracker.records)
    out = _out(args)
    _write_jsonl(out / "tracks.jsonl", tracker.records)
    _write_jsonl(out / "metrics.jsonl", [metrics])
    return metrics


def cmd_ab(args, cfg: ExperimentConfig) -> dict:
    if args.variants:
        variants = yaml.safe_load(Path(args.variants).read_text(encoding="utf-8"))
        if not isinstance(variants, dict):
            raise ValueError("variants file must map variant names to override mappings")
        kind = args.kind
    else:
        variants = PRESETS[args.preset]
        kind = args.kind or PRESET_KIND[args.preset]
    if kind is None:
        raise ValueError("--kind is required with --variants")
    out = _out(args)
    save_config(cfg, out / "config.yaml")
    summary = ab_compare(cfg, variants, kind, cfg.optimizer.seed, args.num_seeds, out)
    return {"medians": summary["medians"], "deltas": summary["deltas"]}


def cmd_attn_maps(args, cfg: ExperimentConfig) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .describe import attention_consistency, embed_crops

    _, desc = load_models(cfg, None, args.descriptor)
    seed = cfg.descriptor_optimizer.seed
    pairs = crop_pairs(cfg, seed, EVAL_STREAM, max(1, min(cfg.pairs.eval_worlds, args.pairs)))
    n = min(args.pairs, len(pairs.ids))
    if n == 0:
        raise ValueError("no held-out pairs to visualize")
    crops = list(pairs.crops_a[:n]) + list(pairs.crops_b[:n])
    _, maps = embed_crops(desc, crops)
    stages = list(cfg.mars.stages) or [len(maps) - 1]
    cols = 2 * (1 + len(stages))
    fig, axes = plt.subplots(n, cols, figsize=(1.6 * cols, 1.6 * n), squeeze=False)
    records = []
    for i in range(n):
        row = {"landmark": int(pairs.ids[i])}
        for v, offset in enumerate((0, n)):
            base = v * (1 + len(stages))
            axes[i, base].imshow(crops[offset + i], cmap="gray", vmin=0, vmax=1)
            for k, s in enumerate(stages):
                axes[i, base + 1 + k].imshow(maps[s][offset + i].numpy(), cmap="magma")
        for s in stages:
            row[f"consistency_stage{s}"] = attention_consistency(maps[s][i], maps[s][n + i])
        records.append(row)
    for ax in axes.flat:
        ax.set_axis_off()
    fig.tight_layout()
    out = _out(args)
    fig.savefig(out / "attention_maps.png", dpi=100)
    plt.close(fig)
    _write_jsonl(out / "attention.jsonl", records)
    means = {k: float(np.mean([r[k] for r in records])) for k in records[0] if k != "landmark"}
    return {"image": str(out / "attention_maps.png"), **means}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def verb(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(func=func)
        return p

    p = verb("datagen", cmd_datagen, "render a source/target dataset or a tracking sequence")
    p.add_argument("--sequence", action="store_true", help="render one tracking sequence instead")
    p.add_argument("--sequence-index", type=int, default=0)
    p.add_argument("--static", action="store_true", help="keep the camera still in the sequence")

    verb("train-detector", cmd_train_detector, "train the detector (adaptation per config)")
    verb("train-descriptor", cmd_train_descriptor, "train the landmark descriptor")

    p = verb("eval", cmd_eval, "evaluate checkpoints")
    p.add_argument("--detector", help="detector checkpoint directory")
    p.add_argument("--descriptor", help="descriptor checkpoint directory")

    p = verb("track", cmd_track, "track landmarks through a sequence manifest")
    p.add_argument("--detector", help="detector checkpoint (oracle boxes when omitted)")
    p.add_argument("--descriptor", help="descriptor checkpoint")
    p.add_argument("--random-embeddings", action="store_true", help="ablation: random appearance codes")
    p.add_argument("--sequence", required=True, help="sequence manifest.jsonl")

    p = verb("ab", cmd_ab, "seeded A/B comparison of config variants")
    p.add_argument("--preset", choices=sorted(PRESETS), default="uda")
    p.add_argument("--variants", help="YAML mapping of variant name to dotted-path overrides")
    p.add_argument("--kind", choices=["detector", "descriptor"])
    p.add_argument("--num-seeds", type=int, default=3)

    p = verb("attn-maps", cmd_attn_maps, "plot spatial attention for held-out view pairs")
    p.add_argument("--descriptor", required=True, help="descriptor checkpoint directory")
    p.add_argument("--pairs", type=int, default=6)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
        _emit(args.func(args, cfg))
    except Exception as exc:  # every failure becomes one machine-readable line
        _emit_error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
