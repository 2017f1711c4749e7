"""Appearance-only frame-to-frame landmark tracking and identity metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import SceneSample
from .detector import Detection, iou


@dataclass
class TrackConfig:
    ratio: float = 0.8
    min_sim: float = 0.5
    momentum: float = 0.7
    max_age: int = 3
    gt_iou: float = 0.5

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if not -1 <= self.min_sim <= 1:
            raise ValueError("min_sim must lie in [-1, 1]")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must lie in [0, 1]")
        if self.max_age < 0:
            raise ValueError("max_age must be non-negative")


@dataclass
class Track:
    track_id: int
    last_embedding: np.ndarray
    history: list[tuple[int, Detection, int | None]] = field(default_factory=list)
    age: int = 0


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_tracks: list[int] = field(default_factory=list)
    unmatched_detections: list[int] = field(default_factory=list)


def _unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def match_embeddings(track_emb, det_emb, ratio: float = 0.8, min_sim: float = 0.5):
    """Greedy mutual-nearest-neighbour association with a ratio test.

    Repeatedly takes the most similar free (track, detection) pair, which is a
    mutual nearest neighbour among the free items.  The pair is accepted when
    its similarity reaches ``min_sim`` and its cosine distance is at most
    ``ratio`` times the distance to the closest free competitor of either side
    (2 when there is none).  A pair failing the ratio test leaves both sides
    unmatched.  Returns ``(pairs, unmatched_rows, unmatched_cols)`` as indices.
    """
    n_t, n_d = len(track_emb), len(det_emb)
    if n_t == 0 or n_d == 0:
        return [], list(range(n_t)), list(range(n_d))
    sim = _unit(track_emb) @ _unit(det_emb).T
    free_t = np.ones(n_t, dtype=bool)
    free_d = np.ones(n_d, dtype=bool)
    pairs = []
    while free_t.any() and free_d.any():
        masked = np.where(free_t[:, None] & free_d[None, :], sim, -np.inf)
        r, c = np.unravel_index(int(np.argmax(masked)), masked.shape)
        best = sim[r, c]
        if best < min_sim:
            break
        row = np.delete(masked[r], c)
        col = np.delete(masked[:, c], r)
        competitors = np.concatenate([row[np.isfinite(row)], col[np.isfinite(col)]])
        second_dist = 1.0 - competitors.max() if len(competitors) else 2.0
        if 1.0 - best <= ratio * second_dist:
            pairs.append((int(r), int(c)))
        free_t[r] = False
        free_d[c] = False
    matched_t = {p[0] for p in pairs}
    matched_d = {p[1] for p in pairs}
    return (
        pairs,
        [i for i in range(n_t) if i not in matched_t],
        [j for j in range(n_d) if j not in matched_d],
    )


def match(tracks: Sequence[Track], det_emb, ratio: float = 0.8, min_sim: float = 0.5) -> MatchResult:
    if not tracks:
        return MatchResult([], [], list(range(len(det_emb))))
    emb = np.stack([tr.last_embedding for tr in tracks])
    pairs, um_t, um_d = match_embeddings(emb, det_emb, ratio, min_sim)
    return MatchResult(
        [(tracks[r].track_id, c) for r, c in pairs],
        [tracks[r].track_id for r in um_t],
        um_d,
    )


def oracle_detections(frame: SceneSample) -> list[Detection]:
    return [Detection(tuple(b), 1.0, c) for b, c in zip(frame.boxes, frame.class_ids)]


def assign_truth(frame: SceneSample, detections: Sequence[Detection], min_iou: float = 0.5):
    """Ground-truth identity per detection by greedy IoU matching (``None`` when unmatched)."""
    cands = []
    for i, det in enumerate(detections):
        for j, box in enumerate(frame.boxes):
            v = iou(det.box, box)
            if v >= min_iou:
                cands.append((-v, i, j))
    cands.sort()
    out: list[int | None] = [None] * len(detections)
    used = set()
    for _, i, j in cands:
        if out[i] is None and j not in used:
            out[i] = frame.instance_ids[j]
            used.add(j)
    return out


EmbedFn = Callable[[np.ndarray, Sequence[Detection]], np.ndarray]
DetectFn = Callable[[np.ndarray], list]


class Tracker:
    """Single-owner tracker state advanced one frame at a time."""

    def __init__(self, cfg: TrackConfig, embed: EmbedFn, detect: DetectFn | None = None):
        self.cfg = cfg
        self.embed = embed
        self.detect = detect
        self.tracks: list[Track] = []
        self.retired: list[Track] = []
        self.frame_index = 0
        self.next_id = 0
        self.records: list[dict] = []

    def step(self, frame: SceneSample, detections: Sequence[Detection] | None = None,
             labeled: bool = True) -> MatchResult:
        if detections is None:
            if self.detect is None:
                raise ValueError("no detections given and no detector configured")
            detections = self.detect(frame.image)
        detections = list(detections)
        truth = assign_truth(frame, detections, self.cfg.gt_iou) if labeled else [None] * len(detections)
        emb = _unit(self.embed(frame.image, detections)) if detections else np.zeros((0, 1))

        alive_truth = {tr.track_id: tr.history[-1][2] for tr in self.tracks}
        result = match(self.tracks, emb, self.cfg.ratio, self.cfg.min_sim)
        by_id = {tr.track_id: tr for tr in self.tracks}
        f = self.frame_index
        m = self.cfg.momentum
        for tid, j in result.pairs:
            tr = by_id[tid]
            tr.last_embedding = _unit(m * tr.last_embedding + (1 - m) * emb[j])
            tr.history.append((f, detections[j], truth[j]))
            tr.age = 0
        for tid in result.unmatched_tracks:
            by_id[tid].age += 1
        spawned = []
        for j in result.unmatched_detections:
            tr = Track(self.next_id, emb[j].copy(), [(f, detections[j], truth[j])], 0)
            self.next_id += 1
            spawned.append((tr.track_id, j))
            self.tracks.append(tr)
        keep = []
        for tr in self.tracks:
            (self.retired if tr.age > self.cfg.max_age else keep).append(tr)
        self.tracks = keep

        self.records.append(
            {
                "frame": f,
                "labeled": labeled,
                "pairs": [[tid, j] for tid, j in result.pairs],
                "spawned": [[tid, j] for tid, j in spawned],
                "unmatched_tracks": list(result.unmatched_tracks),
                "truth": truth,
                "track_truth": {str(k): v for k, v in alive_truth.items()},
            }
        )
        self.frame_index += 1
        return result


def tracking_metrics(records: Sequence[dict]) -> dict:
    """Identity switches, match precision and match recall from tracker records.

    A switch is a ground-truth identity being carried by a different track than
    the last time it was seen.  A match is correct when the detection and the
    track's previous detection share an identity.  Recall counts a match
    opportunity for every labeled detection whose identity was held by a live
    track.  Vacuous precision or recall is 1.0.
    """
    if any(not r["labeled"] for r in records):
        raise ValueError("tracking metrics need ground-truth identities on every frame")
    last_track: dict[int, int] = {}
    switches = matches = correct = opportunities = 0
    for r in records:
        truth = r["truth"]
        track_truth = {int(k): v for k, v in r["track_truth"].items()}
        held = {v for v in track_truth.values() if v is not None}
        opportunities += sum(1 for g in truth if g is not None and g in held)
        for tid, j in r["pairs"]:
            matches += 1
            if truth[j] is not None and track_truth.get(tid) == truth[j]:
                correct += 1
        for tid, j in list(r["pairs"]) + list(r["spawned"]):
            g = truth[j]
            if g is None:
                continue
            if g in last_track and last_track[g] != tid:
                switches += 1
            last_track[g] = tid
    return {
        "identity_switches": switches,
        "match_precision": correct / matches if matches else 1.0,
        "match_recall": correct / opportunities if opportunities else 1.0,
    }
