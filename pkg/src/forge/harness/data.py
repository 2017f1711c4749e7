"""In-memory datasets built from the generator for the training and evaluation loops."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..datagen import (
    SOURCE,
    TARGET,
    DomainShift,
    SceneSample,
    ViewJitter,
    ViewParams,
    VisibilityError,
    generate_samples,
    generate_world,
    make_view_pair,
    render_sequence,
)
from ..describe import extract_crop
from .config import ExperimentConfig, PairDataConfig

# stream tags keep training and held-out data disjoint for one seed
TRAIN_STREAM, EVAL_STREAM, SEQ_STREAM = 0, 1_000, 2_000


def detection_sets(cfg: ExperimentConfig, seed: int):
    """Training source/target samples and held-out evaluation samples per domain."""
    dg = cfg.datagen
    train_src = generate_samples(dg, seed, SOURCE, dg.n_source)
    train_tgt = generate_samples(dg, seed, TARGET, dg.n_target)
    eval_src = generate_samples(dg, seed + EVAL_STREAM, SOURCE, cfg.evaluation.n_source)
    eval_tgt = generate_samples(dg, seed + EVAL_STREAM, TARGET, cfg.evaluation.n_target)
    return train_src, train_tgt, eval_src, eval_tgt


def pair_jitter(pc: PairDataConfig) -> ViewJitter:
    return ViewJitter(
        sun_azimuth=pc.sun_azimuth_jitter,
        sun_elevation=pc.sun_elevation_jitter,
        offset=pc.offset_jitter,
        rotation=pc.rotation_jitter,
        scale=pc.scale_jitter,
        min_delta=pc.min_delta,
    )


@dataclass
class CropPairs:
    crops_a: np.ndarray  # (N, S, S)
    crops_b: np.ndarray
    ids: np.ndarray  # global landmark identity per pair


def crop_pairs(cfg: ExperimentConfig, seed: int, stream: int, n_worlds: int) -> CropPairs:
    """Two-view crops of every landmark fully visible in both views of each world."""
    pc, dg, mc = cfg.pairs, cfg.datagen, cfg.mars
    shift = DomainShift(noise_sigma=pc.noise_sigma)
    jitter = pair_jitter(pc)
    size = (dg.image_size, dg.image_size)
    crops_a, crops_b, ids = [], [], []
    for w in range(n_worlds):
        rng = np.random.default_rng([seed, stream, w])
        n = int(rng.integers(pc.num_landmarks[0], pc.num_landmarks[1] + 1))
        world = generate_world(n, int(rng.integers(2**31)), dg.world_extent, dg.radius_range)
        if not world:
            continue
        anchor = world[int(rng.integers(len(world)))]
        base = ViewParams(
            sun_azimuth=float(rng.uniform(0, 2 * math.pi)),
            sun_elevation=float(rng.uniform(*dg.sun_elevation)),
            camera_offset=anchor.world_pos,
            camera_scale=1.0,
            camera_rotation=float(rng.uniform(-math.pi, math.pi)),
        )
        try:
            a, b = make_view_pair(
                world, anchor.landmark_id, base, jitter, int(rng.integers(2**31)), shift, size,
                SOURCE, w, pc.min_visible,
            )
        except VisibilityError:
            continue
        boxes_b = dict(zip(b.instance_ids, b.boxes))
        for lid, box_a in zip(a.instance_ids, a.boxes):
            if lid not in boxes_b:
                continue
            crops_a.append(extract_crop(a.image, box_a, mc.crop_size, mc.context))
            crops_b.append(extract_crop(b.image, boxes_b[lid], mc.crop_size, mc.context))
            ids.append(w * 1000 + lid)
    shape = (0, mc.crop_size, mc.crop_size)
    return CropPairs(
        np.stack(crops_a) if crops_a else np.zeros(shape),
        np.stack(crops_b) if crops_b else np.zeros(shape),
        np.asarray(ids, dtype=np.int64),
    )


def tracking_sequence(cfg: ExperimentConfig, seed: int, index: int, static: bool = True) -> list[SceneSample]:
    """A fixed world seen over ``sequence_frames`` frames.

    A static sequence keeps the camera still (only the sun drifts); otherwise
    the camera pans and rotates slowly.
    """
    dg = cfg.datagen
    rng = np.random.default_rng([seed, SEQ_STREAM, index])
    world = generate_world(int(rng.integers(5, 9)), int(rng.integers(2**31)), dg.world_extent, dg.radius_range)
    base = ViewParams(
        sun_azimuth=float(rng.uniform(0, 2 * math.pi)),
        sun_elevation=float(rng.uniform(*dg.sun_elevation)),
        camera_offset=(0.0, 0.0),
        camera_scale=1.0,
        camera_rotation=float(rng.uniform(-math.pi, math.pi)),
    )
    return render_sequence(
        world,
        base,
        cfg.evaluation.sequence_frames,
        int(rng.integers(2**31)),
        sun_drift=0.03 if static else 0.08,
        offset_drift=0.0 if static else 1.0,
        rotation_drift=0.0 if static else 0.05,
        shift=DomainShift(noise_sigma=cfg.pairs.noise_sigma),
        size=(dg.image_size, dg.image_size),
    )
