"""Procedural multi-view landmark scenes in a labeled source and an unlabeled target domain.

A world is a list of landmarks (craters, mountains, dunes) sitting on a fractal
height field.  Views are rendered with Lambertian shading from a configurable
camera and sun; the target domain is the same renderer followed by a
:class:`DomainShift` (gamma curve, detail suppression, haze, sensor noise).

World coordinates are centred on the origin.  A view maps a world point ``p`` to
pixels as ``R(rotation) @ (p - camera_offset) * camera_scale + (W/2, H/2)``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

CLASS_NAMES = ("crater", "mountain", "dune")
NUM_CLASSES = len(CLASS_NAMES)
SOURCE, TARGET = "source", "target"
MIN_SIZE = 32
HAZE_LEVEL = 0.6
AMBIENT = 0.1


class PlacementError(RuntimeError):
    """Landmarks could not be placed under the separation rule."""


class VisibilityError(RuntimeError):
    """A requested landmark never appeared in a jittered view."""


class SizeError(ValueError):
    """Requested image size is below the renderer minimum."""


@dataclass(frozen=True)
class LandmarkSpec:
    landmark_id: int
    class_id: int
    world_pos: tuple[float, float]
    radius: float
    relief: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.class_id not in (0, 1, 2):
            raise ValueError(f"class_id must be 0, 1 or 2, got {self.class_id}")
        if self.landmark_id < 0:
            raise ValueError("landmark_id must be non-negative")


@dataclass(frozen=True)
class ViewParams:
    sun_azimuth: float = 0.8
    sun_elevation: float = 0.6
    camera_offset: tuple[float, float] = (0.0, 0.0)
    camera_scale: float = 1.0
    camera_rotation: float = 0.0

    def __post_init__(self):
        if not 0.5 <= self.camera_scale <= 2.0:
            raise ValueError(f"camera_scale must lie in [0.5, 2.0], got {self.camera_scale}")
        if not 0.0 < self.sun_elevation <= math.pi / 2:
            raise ValueError(f"sun_elevation must lie in (0, pi/2], got {self.sun_elevation}")
        object.__setattr__(self, "sun_azimuth", float(self.sun_azimuth) % (2 * math.pi))


@dataclass(frozen=True)
class DomainShift:
    gamma: float = 1.0
    noise_sigma: float = 0.0
    texture_gain: float = 1.0
    haze: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.texture_gain <= 1.0:
            raise ValueError("texture_gain must lie in [0, 1]")
        if not 0.0 <= self.haze <= 1.0:
            raise ValueError("haze must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "DomainShift":
        return cls()

    @classmethod
    def default_target(cls) -> "DomainShift":
        return cls(gamma=1.8, noise_sigma=0.05, texture_gain=0.3, haze=0.3)


@dataclass(frozen=True)
class ViewJitter:
    """Per-view perturbation ranges used by :func:`make_view_pair`.

    Angular and offset entries are half-widths of uniform deltas around the
    base view; ``scale`` is a multiplicative factor range.  ``min_delta`` is the
    smallest change (radians for the angles, absolute for the scale) that at
    least one of sun azimuth, camera rotation or camera scale must show.
    """

    sun_azimuth: float = 0.0
    sun_elevation: float = 0.0
    offset: float = 0.0
    rotation: float = 0.0
    scale: tuple[float, float] = (1.0, 1.0)
    min_delta: float = 0.0

    def is_zero(self) -> bool:
        return (
            self.sun_azimuth == 0
            and self.sun_elevation == 0
            and self.offset == 0
            and self.rotation == 0
            and tuple(self.scale) == (1.0, 1.0)
        )


@dataclass
class SceneSample:
    image: np.ndarray
    boxes: list[tuple[float, float, float, float]]
    instance_ids: list[int]
    class_ids: list[int]
    domain: str
    view_group: int
    seed: int

    def __post_init__(self):
        if not (len(self.boxes) == len(self.instance_ids) == len(self.class_ids)):
            raise ValueError("boxes, instance_ids and class_ids must have equal length")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"unknown domain {self.domain!r}")
        h, w = self.image.shape
        for b in self.boxes:
            if not (0 <= b[0] < b[2] <= w and 0 <= b[1] < b[3] <= h):
                raise ValueError(f"invalid box {b} for image of size {h}x{w}")

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape


# ----------------------------------------------------------------------------
# worlds


def generate_world(
    num_landmarks: int,
    seed: int,
    extent: float = 128.0,
    radius_range: tuple[float, float] = (8.0, 14.0),
    max_attempts: int = 2000,
) -> list[LandmarkSpec]:
    """Place ``num_landmarks`` landmarks in a square of side ``extent``.

    Centres are at least ``1.5 * max radius`` apart.  Classes are assigned
    round-robin over the landmark index and then shuffled, so every class
    appears once ``num_landmarks >= 3``.
    """
    if num_landmarks < 0:
        raise ValueError("num_landmarks must be non-negative")
    rng = np.random.default_rng([seed, 0x57])
    r_lo, r_hi = radius_range
    min_sep = 1.5 * r_hi
    half = extent / 2 - r_hi
    if half <= 0:
        raise PlacementError("extent too small for the radius range")

    classes = rng.permutation(np.arange(num_landmarks) % NUM_CLASSES)
    centres: list[np.ndarray] = []
    attempts = 0
    while len(centres) < num_landmarks:
        attempts += 1
        if attempts > max_attempts * max(num_landmarks, 1):
            raise PlacementError(
                f"placed {len(centres)} of {num_landmarks} landmarks before giving up"
            )
        c = rng.uniform(-half, half, size=2)
        if all(np.hypot(*(c - o)) >= min_sep for o in centres):
            centres.append(c)

    world = []
    for i, (c, cls) in enumerate(zip(centres, classes)):
        radius = float(rng.uniform(r_lo, r_hi))
        if cls == 0:
            relief = -radius * rng.uniform(0.25, 0.45)
        elif cls == 1:
            relief = radius * rng.uniform(0.5, 0.8)
        else:
            relief = radius * rng.uniform(0.08, 0.15)
        world.append(
            LandmarkSpec(
                landmark_id=i,
                class_id=int(cls),
                world_pos=(float(c[0]), float(c[1])),
                radius=radius,
                relief=float(relief),
            )
        )
    return world


def world_fingerprint(world: Sequence[LandmarkSpec]) -> int:
    """Stable 32-bit hash of a world; seeds its terrain."""
    h = hashlib.sha256()
    for lm in world:
        h.update(
            struct.pack(
                "<iiddd d",
                lm.landmark_id,
                lm.class_id,
                lm.world_pos[0],
                lm.world_pos[1],
                lm.radius,
                lm.relief,
            )
        )
    return int.from_bytes(h.digest()[:4], "little")


class Terrain:
    """Sum-of-plane-waves fractal height field, split into base and detail layers."""

    def __init__(self, seed: int, octaves: int = 6, base_octaves: int = 2,
                 waves: int = 5, amplitude: float = 2.5, decay: float = 0.45,
                 base_frequency: float = 1.0 / 64.0):
        rng = np.random.default_rng([seed, 0x7E])
        self.layers = []
        for o in range(octaves):
            theta = rng.uniform(0, 2 * np.pi, size=waves)
            phase = rng.uniform(0, 2 * np.pi, size=waves)
            freq = base_frequency * 2.0**o
            kx, ky = 2 * np.pi * freq * np.cos(theta), 2 * np.pi * freq * np.sin(theta)
            amp = amplitude * decay**o / np.sqrt(waves)
            self.layers.append((o < base_octaves, kx, ky, phase, amp))

    def __call__(self, x: np.ndarray, y: np.ndarray, texture_gain: float = 1.0):
        """Height and its analytic x/y derivatives, detail octaves scaled by ``texture_gain``."""
        h = np.zeros_like(x)
        hx = np.zeros_like(x)
        hy = np.zeros_like(x)
        for is_base, kx, ky, phase, amp in self.layers:
            a = amp if is_base else amp * texture_gain
            if a == 0:
                continue
            for k in range(len(kx)):
                arg = kx[k] * x + ky[k] * y + phase[k]
                c = np.cos(arg)
                h += a * np.sin(arg)
                hx += (a * kx[k]) * c
                hy += (a * ky[k]) * c
        return h, hx, hy


def _landmark_height(lm: LandmarkSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    dx, dy = x - lm.world_pos[0], y - lm.world_pos[1]
    r = np.hypot(dx, dy) / lm.radius
    if lm.class_id == 0:
        bowl = np.where(r < 1.0, lm.relief * (1.0 - r**2), 0.0)
        rim = abs(lm.relief) * 0.35 * np.exp(-(((r - 1.0) / 0.18) ** 2))
        return bowl + rim
    if lm.class_id == 1:
        return lm.relief * np.clip(1.0 - r, 0.0, 1.0) ** 1.5
    # dune: crests along a per-landmark orientation
    ang = (lm.landmark_id * 2.399963) % np.pi
    u = (dx * np.cos(ang) + dy * np.sin(ang)) / lm.radius
    v = (-dx * np.sin(ang) + dy * np.cos(ang)) / lm.radius
    env = np.exp(-2.0 * u**2 - 2.0 * (v / 0.8) ** 2)
    crest = 0.5 + 0.5 * np.cos(2 * np.pi * v / 0.4)
    return lm.relief * env * crest * 2.0


def _landmark_relief(world, x, y) -> np.ndarray:
    h = np.zeros_like(x)
    for lm in world:
        # only evaluate near the footprint; profiles are negligible beyond 2 radii
        reach = 2.0 * lm.radius
        near = (np.abs(x - lm.world_pos[0]) < reach) & (np.abs(y - lm.world_pos[1]) < reach)
        if near.any():
            h[near] += _landmark_height(lm, x[near], y[near])
    return h


def _pixel_to_world(view: ViewParams, size: tuple[int, int]):
    h, w = size
    py, px = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    u = (px - w / 2) / view.camera_scale
    v = (py - h / 2) / view.camera_scale
    c, s = math.cos(view.camera_rotation), math.sin(view.camera_rotation)
    # inverse rotation
    x = c * u + s * v + view.camera_offset[0]
    y = -s * u + c * v + view.camera_offset[1]
    return x, y


def world_to_pixel(view: ViewParams, size: tuple[int, int], point) -> tuple[float, float]:
    h, w = size
    dx = point[0] - view.camera_offset[0]
    dy = point[1] - view.camera_offset[1]
    c, s = math.cos(view.camera_rotation), math.sin(view.camera_rotation)
    px = (c * dx - s * dy) * view.camera_scale + w / 2
    py = (s * dx + c * dy) * view.camera_scale + h / 2
    return px, py


def landmark_box(lm: LandmarkSpec, view: ViewParams, size: tuple[int, int]):
    """Clipped pixel box of a landmark's footprint, or ``None`` when fully outside."""
    h, w = size
    cx, cy = world_to_pixel(view, size, lm.world_pos)
    r = lm.radius * view.camera_scale
    x0, y0, x1, y1 = cx - r, cy - r, cx + r, cy + r
    bx0, by0 = max(x0, 0.0), max(y0, 0.0)
    bx1, by1 = min(x1, float(w)), min(y1, float(h))
    if bx1 <= bx0 or by1 <= by0:
        return None
    visible = (bx1 - bx0) * (by1 - by0) / ((x1 - x0) * (y1 - y0))
    return (bx0, by0, bx1, by1), visible


def apply_shift(image: np.ndarray, shift: DomainShift, seed: int) -> np.ndarray:
    """Photometric part of a domain shift (texture suppression happens in the height field)."""
    out = np.clip(image, 0.0, 1.0) ** shift.gamma
    out = (1.0 - shift.haze) * out + shift.haze * HAZE_LEVEL
    if shift.noise_sigma > 0:
        rng = np.random.default_rng([seed, 0xA0])
        out = out + rng.normal(0.0, shift.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def render_view(
    world: Sequence[LandmarkSpec],
    view: ViewParams,
    shift: DomainShift = DomainShift(),
    size: tuple[int, int] = (128, 128),
    seed: int = 0,
    domain: str = SOURCE,
    view_group: int = 0,
    min_visible: float = 0.0,
) -> SceneSample:
    """Render one view of ``world``.

    Landmarks whose footprint is fully outside the frame (or whose visible
    fraction is below ``min_visible``) are omitted from the ground truth.
    """
    h, w = size
    if h < MIN_SIZE or w < MIN_SIZE:
        raise SizeError(f"image size must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}")
    terrain = Terrain(world_fingerprint(world))
    x, y = _pixel_to_world(view, size)
    _, hx, hy = terrain(x, y, shift.texture_gain)
    eps = 0.25
    hx += (_landmark_relief(world, x + eps, y) - _landmark_relief(world, x - eps, y)) / (2 * eps)
    hy += (_landmark_relief(world, x, y + eps) - _landmark_relief(world, x, y - eps)) / (2 * eps)
    ce = math.cos(view.sun_elevation)
    light = np.array(
        [ce * math.cos(view.sun_azimuth), ce * math.sin(view.sun_azimuth), math.sin(view.sun_elevation)]
    )
    lambert = (-hx * light[0] - hy * light[1] + light[2]) / np.sqrt(hx**2 + hy**2 + 1.0)
    image = AMBIENT + (1.0 - AMBIENT) * np.clip(lambert, 0.0, 1.0)
    image = apply_shift(image, shift, seed)

    boxes, ids, classes = [], [], []
    for lm in world:
        hit = landmark_box(lm, view, size)
        if hit is None or hit[1] < min_visible:
            continue
        boxes.append(hit[0])
        ids.append(lm.landmark_id)
        classes.append(lm.class_id)
    return SceneSample(
        image=image,
        boxes=boxes,
        instance_ids=ids,
        class_ids=classes,
        domain=domain,
        view_group=view_group,
        seed=seed,
    )


def _angle_diff(a: float, b: float) -> float:
    d = (a - b) % (2 * math.pi)
    return min(d, 2 * math.pi - d)


def jitter_view(base: ViewParams, jitter: ViewJitter, rng: np.random.Generator) -> ViewParams:
    if jitter.is_zero():
        return base
    az = base.sun_azimuth + rng.uniform(-jitter.sun_azimuth, jitter.sun_azimuth)
    el = base.sun_elevation + rng.uniform(-jitter.sun_elevation, jitter.sun_elevation)
    el = float(np.clip(el, 0.05, math.pi / 2))
    off = np.asarray(base.camera_offset) + rng.uniform(-jitter.offset, jitter.offset, size=2)
    rot = base.camera_rotation + rng.uniform(-jitter.rotation, jitter.rotation)
    scale = base.camera_scale * rng.uniform(*jitter.scale)
    scale = float(np.clip(scale, 0.5, 2.0))
    return ViewParams(az, el, (float(off[0]), float(off[1])), scale, float(rot))


def make_view_pair(
    world: Sequence[LandmarkSpec],
    landmark_id: int,
    base_view: ViewParams,
    jitter: ViewJitter,
    seed: int,
    shift: DomainShift = DomainShift(),
    size: tuple[int, int] = (128, 128),
    domain: str = SOURCE,
    view_group: int = 0,
    min_visible: float = 0.0,
    max_tries: int = 50,
) -> tuple[SceneSample, SceneSample]:
    """Two jittered views of ``world`` that both contain ``landmark_id``.

    Both views share ``seed`` and ``view_group``.
    """
    rng = np.random.default_rng([seed, 0x9A1])
    for _ in range(max_tries):
        va = jitter_view(base_view, jitter, rng)
        vb = jitter_view(base_view, jitter, rng)
        if jitter.min_delta > 0:
            delta = max(
                _angle_diff(va.sun_azimuth, vb.sun_azimuth),
                _angle_diff(va.camera_rotation, vb.camera_rotation),
                abs(va.camera_scale - vb.camera_scale),
            )
            if delta < jitter.min_delta:
                continue
        a = render_view(world, va, shift, size, seed, domain, view_group, min_visible)
        if landmark_id not in a.instance_ids:
            continue
        b = render_view(world, vb, shift, size, seed, domain, view_group, min_visible)
        if landmark_id in b.instance_ids:
            return a, b
    raise VisibilityError(f"landmark {landmark_id} not visible in both views after {max_tries} tries")


def render_sequence(
    world: Sequence[LandmarkSpec],
    base_view: ViewParams,
    num_frames: int,
    seed: int,
    sun_drift: float = 0.02,
    offset_drift: float = 0.0,
    rotation_drift: float = 0.0,
    shift: DomainShift = DomainShift(),
    size: tuple[int, int] = (128, 128),
    domain: str = SOURCE,
) -> list[SceneSample]:
    """Frames of a slowly drifting camera/sun over a fixed world (all share one view_group)."""
    frames = []
    for t in range(num_frames):
        off = (
            base_view.camera_offset[0] + offset_drift * t,
            base_view.camera_offset[1] + 0.5 * offset_drift * t,
        )
        view = ViewParams(
            base_view.sun_azimuth + sun_drift * t,
            base_view.sun_elevation,
            off,
            base_view.camera_scale,
            base_view.camera_rotation + rotation_drift * t,
        )
        frames.append(render_view(world, view, shift, size, seed + t, domain, view_group=0))
    return frames


# ----------------------------------------------------------------------------
# datasets


@dataclass
class DatagenConfig:
    n_source: int = 512
    n_target: int = 512
    image_size: int = 128
    num_landmarks: tuple[int, int] = (4, 8)
    radius_range: tuple[float, float] = (8.0, 14.0)
    world_extent: float = 128.0
    views_per_world: int = 1
    sun_elevation: tuple[float, float] = (0.35, 1.0)
    camera_scale: tuple[float, float] = (0.9, 1.1)
    camera_rotation: float = math.pi
    camera_offset: float = 8.0
    min_visible: float = 0.5
    source_shift: DomainShift = field(default_factory=DomainShift)
    target_shift: DomainShift = field(default_factory=DomainShift.default_target)

    def __post_init__(self):
        self.num_landmarks = tuple(self.num_landmarks)
        self.radius_range = tuple(self.radius_range)
        self.sun_elevation = tuple(self.sun_elevation)
        self.camera_scale = tuple(self.camera_scale)
        if isinstance(self.source_shift, dict):
            self.source_shift = DomainShift(**self.source_shift)
        if isinstance(self.target_shift, dict):
            self.target_shift = DomainShift(**self.target_shift)
        if self.n_source < 0 or self.n_target < 0:
            raise ValueError("sample counts must be non-negative")
        if self.image_size < MIN_SIZE:
            raise SizeError(f"image_size must be at least {MIN_SIZE}")
        if self.views_per_world < 1:
            raise ValueError("views_per_world must be >= 1")
        if not 0 <= self.num_landmarks[0] <= self.num_landmarks[1]:
            raise ValueError("num_landmarks must be an ordered (min, max) pair")


def sample_view(cfg: DatagenConfig, rng: np.random.Generator) -> ViewParams:
    return ViewParams(
        sun_azimuth=float(rng.uniform(0, 2 * math.pi)),
        sun_elevation=float(rng.uniform(*cfg.sun_elevation)),
        camera_offset=tuple(float(v) for v in rng.uniform(-cfg.camera_offset, cfg.camera_offset, size=2)),
        camera_scale=float(rng.uniform(*cfg.camera_scale)),
        camera_rotation=float(rng.uniform(-cfg.camera_rotation, cfg.camera_rotation)),
    )


def generate_samples(cfg: DatagenConfig, seed: int, domain: str, count: int) -> list[SceneSample]:
    """Render ``count`` samples of one domain; a pure function of ``(cfg, seed, domain)``."""
    stream = 1 if domain == SOURCE else 2
    shift = cfg.source_shift if domain == SOURCE else cfg.target_shift
    size = (cfg.image_size, cfg.image_size)
    samples: list[SceneSample] = []
    group = 0
    while len(samples) < count:
        rng = np.random.default_rng([seed, stream, group])
        n = int(rng.integers(cfg.num_landmarks[0], cfg.num_landmarks[1] + 1))
        world = generate_world(n, int(rng.integers(2**31)), cfg.world_extent, cfg.radius_range)
        for _ in range(cfg.views_per_world):
            if len(samples) == count:
                break
            view = sample_view(cfg, rng)
            sample_seed = int(rng.integers(2**31))
            samples.append(
                render_view(world, view, shift, size, sample_seed, domain, group, cfg.min_visible)
            )
        group += 1
    return samples


def to_png_bytes(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def sample_record(sample: SceneSample, image_path: str) -> dict:
    return {
        "image": image_path,
        "boxes": [[float(v) for v in b] for b in sample.boxes],
        "instance_ids": [int(i) for i in sample.instance_ids],
        "class_ids": [int(c) for c in sample.class_ids],
        "domain": sample.domain,
        "view_group": int(sample.view_group),
        "seed": int(sample.seed),
    }


def write_manifest(samples: Iterable[SceneSample], out_dir: str | os.PathLike, prefix: str = "") -> Path:
    """Write PNGs plus ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    lines = []
    counters: dict[str, int] = {}
    for s in samples:
        idx = counters.get(s.domain, 0)
        counters[s.domain] = idx + 1
        rel = f"images/{prefix}{s.domain}_{idx:05d}.png"
        (out / rel).write_bytes(to_png_bytes(s.image))
        lines.append(json.dumps(sample_record(s, rel), sort_keys=False))
    path = out / "manifest.jsonl"
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def build_dataset(cfg: DatagenConfig, seed: int, out_dir: str | os.PathLike) -> Path:
    samples = generate_samples(cfg, seed, SOURCE, cfg.n_source) + generate_samples(
        cfg, seed, TARGET, cfg.n_target
    )
    return write_manifest(samples, out_dir)


def load_manifest(path: str | os.PathLike) -> list[SceneSample]:
    """Read a manifest back; images come back quantized to 8 bits."""
    path = Path(path)
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            img = np.asarray(Image.open(path.parent / rec["image"]), dtype=np.float64) / 255.0
            samples.append(
                SceneSample(
                    image=img,
                    boxes=[tuple(b) for b in rec["boxes"]],
                    instance_ids=list(rec["instance_ids"]),
                    class_ids=list(rec["class_ids"]),
                    domain=rec["domain"],
                    view_group=rec["view_group"],
                    seed=rec["seed"],
                )
            )
    return samples


def datagen_config_dict(cfg: DatagenConfig) -> dict:
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d
