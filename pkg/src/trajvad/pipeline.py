"""End-to-end helpers tying files, segments, training, scoring and metrics together."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import track_io
from .evaluation import evaluate
from .features import compute_features
from .model import FlowModel
from .pose_branch import compute_gate, normalize_pose
from .preprocess import segment_track, smooth_track
from .scoring import aggregate_all, score_segments
from .track_io import IngestReport, Track, VideoMeta
from .training import SegmentSet, TrainConfig, train


@dataclass
class Split:
    tracks: list[Track]
    metas: dict[str, VideoMeta]
    truths: dict[str, track_io.GroundTruth] = field(default_factory=dict)
    report: IngestReport = field(default_factory=IngestReport)


@dataclass
class Timer:
    """Accumulates wall time per named stage."""

    stages: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, seconds: float) -> None:
        self.stages[name] = self.stages.get(name, 0.0) + seconds


def load_split(directory=None, *, tracks=None, meta=None, poses=None, labels=None,
               gap_tolerance: int = track_io.GAP_TOLERANCE) -> Split:
    """Read a directory in the ``synth`` layout or explicit file paths."""
    if directory is not None:
        d = Path(directory)
        tracks = tracks or d / "tracks.csv"
        meta = meta or d / "meta.csv"
        if poses is None and (d / "poses.csv").exists():
            poses = d / "poses.csv"
        if labels is None and (d / "labels.txt").exists():
            labels = d / "labels.txt"
    report = IngestReport()
    metas = track_io.read_meta(meta)
    parsed = track_io.parse_tracks(tracks, meta, gap_tolerance, report)
    if poses is not None:
        track_io.parse_pose(poses, parsed, metas, report)
    truths = track_io.read_labels(labels) if labels is not None else {}
    return Split(parsed, metas, truths, report)


def build_segments(tracks: list[Track], T: int = 16, stride: int = 1, smooth_radius: int = 2,
                   person_class: int = 0, with_pose: bool = False) -> SegmentSet:
    """Smooth, window and featurize every track."""
    feats, ids, prov, poses, gates = [], [], [], [], []
    for track in tracks:
        sm = smooth_track(track, smooth_radius)
        for win in segment_track(sm, T, stride):
            feats.append(compute_features(win))
            ids.append(track.class_id)
            prov.append((track.video_id, track.track_id, win.start_frame))
            if with_pose:
                pw = normalize_pose(win)
                poses.append(pw.keypoints)
                gates.append(compute_gate(win, person_class, pw).value)
    n_feat = 27
    features = np.stack(feats) if feats else np.zeros((0, T, n_feat))
    segs = SegmentSet(features, np.asarray(ids, dtype=np.int64), provenance=prov)
    if with_pose:
        segs.pose = np.stack(poses) if poses else np.zeros((0, T, 34))
        segs.gates = np.asarray(gates, dtype=np.float64)
    return segs


def fit(config: TrainConfig, split: Split, timer: Timer | None = None) -> FlowModel:
    t0 = time.perf_counter()
    segs = build_segments(split.tracks, config.T, 1, person_class=config.person_class,
                          with_pose=config.variant == "p")
    t1 = time.perf_counter()
    model = train(config, segs)
    if timer is not None:
        timer.add("preprocess", t1 - t0)
        timer.add("train", time.perf_counter() - t1)
    return model


def score(model: FlowModel, split: Split, stride: int = 1, smooth_sigma: float = 0.0,
          timer: Timer | None = None):
    """Frame score series for every video of ``split``; returns (series, n_segments)."""
    cfg = model.config
    t0 = time.perf_counter()
    segs = build_segments(split.tracks, cfg.T, stride, cfg.smooth_radius, cfg.person_class,
                          with_pose=model.pose_flow is not None)
    t1 = time.perf_counter()
    scores = score_segments(model, segs) if len(segs) else []
    t2 = time.perf_counter()
    series = aggregate_all(scores, split.metas, smooth_sigma,
                           with_pose=model.pose_flow is not None)
    if timer is not None:
        timer.add("preprocess", t1 - t0)
        timer.add("inference", t2 - t1)
        timer.add("aggregate", time.perf_counter() - t2)
    return series, len(segs)


def run(config: TrainConfig, train_split: Split, test_split: Split, smooth_sigma: float = 0.0):
    """Train on one split, score and evaluate another; returns (model, series, report)."""
    model = fit(config, train_split)
    series, _ = score(model, test_split, smooth_sigma=smooth_sigma)
    return model, series, evaluate(series, test_split.truths)
