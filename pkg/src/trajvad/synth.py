"""Deterministic synthetic scenes with injected trajectory anomalies.

Normal objects walk or ride along noisy constant-velocity paths whose box
size drifts with vertical position (a crude perspective).  Test scenes add
anomalous actors whose anomaly runs from an onset frame until the actor
leaves the scene; the affected frames are labelled 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import track_io
from .track_io import GroundTruth, RawDetection, VideoMeta

PERSON, BICYCLE, CAR = 0, 1, 2
ANOMALY_TYPES = ("speed_spike", "erratic", "scale_burst", "wrong_class", "confidence_collapse")

# COCO keypoints in box-relative coordinates (x across width, y down height)
POSE_TEMPLATE = np.array([
    [0.50, 0.07], [0.45, 0.05], [0.55, 0.05], [0.40, 0.07], [0.60, 0.07],
    [0.30, 0.22], [0.70, 0.22], [0.22, 0.40], [0.78, 0.40], [0.20, 0.55],
    [0.80, 0.55], [0.38, 0.55], [0.62, 0.55], [0.37, 0.76], [0.63, 0.76],
    [0.36, 0.96], [0.64, 0.96],
])


@dataclass
class ClassMotion:
    speed: tuple[float, float]
    height: tuple[float, float]
    aspect: float   # width / height in normalized units


@dataclass
class ScenarioConfig:
    seed: int = 0
    videos: int = 10
    frames: int = 240
    objects: int = 4
    width: int = 1280
    height: int = 720
    fps: float = 30.0
    class_mix: dict = field(default_factory=lambda: {PERSON: 0.8, BICYCLE: 0.2})
    motion: dict = field(default_factory=lambda: {
        PERSON: ClassMotion((0.0025, 0.0035), (0.16, 0.24), 0.4 * 720 / 1280),
        BICYCLE: ClassMotion((0.005, 0.007), (0.14, 0.2), 0.8 * 720 / 1280),
        CAR: ClassMotion((0.010, 0.014), (0.12, 0.16), 2.0 * 720 / 1280),
    })
    direction_std: float = 0.015
    scale_drift_std: float = 0.002
    box_jitter: float = 0.0008
    conf_mean: float = 0.85
    conf_std: float = 0.04
    anomaly_rate: float = 0.0
    anomaly_mix: dict = field(default_factory=lambda: {a: 1.0 / len(ANOMALY_TYPES)
                                                       for a in ANOMALY_TYPES})
    anomaly_length: tuple[int, int] = (30, 60)
    spike_factor: float = 4.0
    collapse_conf: float = 0.35
    with_pose: bool = True
    pose_jitter: float = 0.01
    pose_conf_mean: float = 0.85
    pose_dropout: float = 0.01
    video_prefix: str = "video"

    def __post_init__(self):
        for name, mix in (("class_mix", self.class_mix), ("anomaly_mix", self.anomaly_mix)):
            total = sum(mix.values())
            if not math.isclose(total, 1.0, abs_tol=1e-9):
                raise ValueError(f"{name} proportions sum to {total}, expected 1")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise ValueError("anomaly_rate must lie in [0, 1]")
        unknown = set(self.anomaly_mix) - set(ANOMALY_TYPES)
        if unknown:
            raise ValueError(f"unknown anomaly types {sorted(unknown)}")


@dataclass
class SyntheticScene:
    detections: list[RawDetection]
    metas: list[VideoMeta]
    truths: list[GroundTruth]
    poses: list[tuple] | None
    events: list[dict]

    def write(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        track_io.write_detections(self.detections, d / "tracks.csv")
        track_io.write_meta(self.metas, d / "meta.csv")
        track_io.write_labels(self.truths, d / "labels.txt")
        if self.poses is not None:
            track_io.write_poses(self.poses, d / "poses.csv")


def _pick(rng, mix: dict):
    keys = list(mix)
    p = np.array([mix[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=p / p.sum()))]


def _inside(cx, cy, w, h) -> bool:
    return w / 2 <= cx <= 1 - w / 2 and h / 2 <= cy <= 1 - h / 2


def _simulate(rng, cfg: ScenarioConfig, cls: int, start: int, max_len: int,
              anomaly: str | None = None, onset: int = 0):
    """Roll out one object; returns per-frame (cx, cy, w, h, conf) rows.

    ``onset`` counts frames from the object's first frame.  The rollout
    stops when the box would leave the frame or after ``max_len`` frames.
    """
    mot = cfg.motion[cls]
    h0 = rng.uniform(*mot.height)
    w0 = h0 * mot.aspect
    cx = rng.uniform(w0 / 2 + 0.05, 1 - w0 / 2 - 0.05)
    cy = rng.uniform(h0 / 2 + 0.05, 1 - h0 / 2 - 0.05)
    to_centre = math.atan2(0.5 - cy, 0.5 - cx)
    heading = to_centre + rng.uniform(-1.0, 1.0)
    speed = rng.uniform(*mot.speed)
    cy0 = cy
    drift = 0.0
    burst_sign = rng.choice([-1.0, 1.0])
    burst = 0.0
    rows = []
    for k in range(max_len):
        abnormal = anomaly is not None and k >= onset
        if k > 0:
            heading += rng.normal(0.0, cfg.direction_std)
            if abnormal and anomaly == "erratic" and (k - onset) % 3 == 0:
                heading += rng.choice([-1.0, 1.0]) * rng.uniform(0.8, 1.4)
            step = speed * (cfg.spike_factor if abnormal and anomaly == "speed_spike" else 1.0)
            cx += step * math.cos(heading)
            cy += step * math.sin(heading)
            drift += rng.normal(0.0, cfg.scale_drift_std)
            if abnormal and anomaly == "scale_burst":
                burst += 0.05 * burst_sign
        scale = (0.6 + 0.8 * cy) / (0.6 + 0.8 * cy0) * math.exp(drift + burst)
        h = min(max(h0 * scale, 0.03), 0.6)
        w = min(max(w0 * scale, 0.01), 0.6)
        if not _inside(cx, cy, w, h):
            break
        if abnormal and anomaly == "confidence_collapse":
            conf = rng.normal(cfg.collapse_conf, 0.05)
        else:
            conf = rng.normal(cfg.conf_mean, cfg.conf_std)
        rows.append((cx, cy, w, h, float(np.clip(conf, 0.05, 0.99))))
    return rows


def _jitter(rng, cfg, rows):
    out = []
    for cx, cy, w, h, conf in rows:
        jx, jy = rng.normal(0.0, cfg.box_jitter, size=2)
        sw, sh = np.exp(rng.normal(0.0, 0.005, size=2))
        w2, h2 = w * sw, h * sh
        cx2 = float(np.clip(cx + jx, w2 / 2, 1 - w2 / 2))
        cy2 = float(np.clip(cy + jy, h2 / 2, 1 - h2 / 2))
        out.append((cx2, cy2, w2, h2, conf))
    return out


def _pose_rows(rng, cfg, video_id, track_id, start, rows, collapse_from=None):
    out = []
    for k, (cx, cy, w, h, _) in enumerate(rows):
        if rng.random() < cfg.pose_dropout:
            continue
        x0, y0 = cx - w / 2, cy - h / 2
        kp = np.empty((17, 2))
        kp[:, 0] = (x0 + POSE_TEMPLATE[:, 0] * w + rng.normal(0, cfg.pose_jitter * h, 17)) * cfg.width
        kp[:, 1] = (y0 + POSE_TEMPLATE[:, 1] * h + rng.normal(0, cfg.pose_jitter * h, 17)) * cfg.height
        mean = cfg.pose_conf_mean
        if collapse_from is not None and k >= collapse_from:
            mean = 0.3
        q = np.clip(rng.normal(mean, 0.05, 17), 0.0, 1.0)
        out.append((video_id, track_id, start + k, kp, q))
    return out


def _generate_video(cfg: ScenarioConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index])
    video_id = f"{cfg.video_prefix}{index:03d}"
    F = cfg.frames
    labels = np.zeros(F, dtype=np.int64)
    human = np.zeros(F, dtype=bool)
    dets, poses, events = [], [], []
    next_id = 0

    def emit(cls, start, rows, anomaly=None, onset=None):
        nonlocal next_id
        tid = next_id
        next_id += 1
        rows = _jitter(rng, cfg, rows)
        for k, (cx, cy, w, h, conf) in enumerate(rows):
            dets.append(RawDetection(video_id, start + k, tid, cls,
                                     (cx * cfg.width, cy * cfg.height, w * cfg.width, h * cfg.height),
                                     conf))
        if cfg.with_pose and cls == PERSON:
            collapse = onset if anomaly == "confidence_collapse" else None
            poses.extend(_pose_rows(rng, cfg, video_id, tid, start, rows, collapse))
        return tid

    for _ in range(cfg.objects):
        cls = _pick(rng, cfg.class_mix)
        start = int(rng.integers(0, max(1, F - 40)))
        rows = _simulate(rng, cfg, cls, start, F - start)
        if rows:
            emit(cls, start, rows)

    target = cfg.anomaly_rate * F
    attempts = 0
    while cfg.anomaly_rate > 0 and labels.sum() < target and attempts < 50:
        attempts += 1
        kind = _pick(rng, cfg.anomaly_mix)
        length = int(rng.integers(cfg.anomaly_length[0], cfg.anomaly_length[1] + 1))
        if kind == "wrong_class":
            cls, lead = CAR, 0
        else:
            cls = PERSON if kind == "confidence_collapse" else _pick(rng, cfg.class_mix)
            lead = int(rng.integers(0, 31))
        start = int(rng.integers(0, max(1, F - length - lead)))
        rows = _simulate(rng, cfg, cls, start, min(F - start, lead + length), kind, lead)
        if len(rows) < lead + 16:
            continue
        a, b = start + lead, start + len(rows)
        added = int((labels[a:b] == 0).sum())
        if events and labels.sum() + added > 1.15 * target:
            continue
        tid = emit(cls, start, rows, kind, lead)
        labels[a:b] = 1
        if cls == PERSON:
            human[a:b] = True
        events.append({"video_id": video_id, "type": kind, "class_id": cls,
                       "track_id": tid, "start": a, "end": b - 1})

    hr = np.where(labels == 1, human, True).astype(np.int64)
    meta = VideoMeta(video_id, cfg.width, cfg.height, F, cfg.fps)
    return dets, meta, GroundTruth(video_id, labels, hr), poses, events


def generate(config: ScenarioConfig) -> SyntheticScene:
    dets, metas, truths, poses, events = [], [], [], [], []
    for i in range(config.videos):
        d, m, g, p, e = _generate_video(config, i)
        dets += d
        metas.append(m)
        truths.append(g)
        poses += p
        events += e
    dets.sort(key=lambda d: (d.video_id, d.frame_index, d.track_id))
    poses.sort(key=lambda p: (p[0], p[2], p[1]))
    return SyntheticScene(dets, metas, truths, poses if config.with_pose else None, events)


PRESETS = {
    "benchmark": {},
    "confidence": {"anomaly_mix": {"speed_spike": 0.1, "erratic": 0.1, "scale_burst": 0.1,
                                   "wrong_class": 0.1, "confidence_collapse": 0.6}},
    "smoke": {"frames": 120, "objects": 3},
}


def benchmark_scenarios(preset: str = "benchmark", seed: int = 0,
                        train_videos: int = 20, test_videos: int = 10,
                        anomaly_rate: float = 0.3) -> tuple[ScenarioConfig, ScenarioConfig]:
    """Paired normal-only training and anomalous test scenarios."""
    overrides = PRESETS[preset]
    base = ScenarioConfig(seed=seed, **overrides)
    train = replace(base, videos=train_videos, anomaly_rate=0.0, video_prefix="train")
    test = replace(base, seed=seed + 1, videos=test_videos, anomaly_rate=anomaly_rate,
                   video_prefix="test")
    return train, test
