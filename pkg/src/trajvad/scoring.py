"""Segment scoring and segment-to-frame aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .flow import gaussian_log_prob
from .model import POSE_DIM, FlowModel, normalized_nll
from .pose_branch import combined_score, pooled_latent
from .preprocess import apply_standardizer
from .track_io import FrameScoreSeries, VideoMeta
from .training import SegmentSet

CHUNK = 512


@dataclass(frozen=True)
class SegmentScore:
    video_id: str
    track_id: str
    start_frame: int
    length: int
    score: float
    traj: float
    pose: float | None = None
    gate: float = 0.0


def segment_log_likelihoods(model: FlowModel, segments: SegmentSet):
    """Trajectory log-likelihoods, and pose log-likelihoods where the gate is open."""
    feats = segments.features
    if feats.shape[-1] != model.standardizer.n_features:
        raise ValueError(f"segments carry {feats.shape[-1]} features, checkpoint expects "
                         f"{model.standardizer.n_features}")
    N = len(segments)
    X = apply_standardizer(model.standardizer, feats)
    ids = np.asarray(segments.class_ids)
    mu0 = model.config.mu0
    ll_traj = np.empty(N)
    ll_pose = np.full(N, np.nan)
    gates = np.zeros(N)
    use_pose = model.pose_flow is not None and segments.gates is not None
    if use_pose:
        gates = np.asarray(segments.gates, dtype=np.float64)
    for a in range(0, N, CHUNK):
        sl = slice(a, min(a + CHUNK, N))
        x = model.assemble(X[sl], ids[sl])
        z, logdet, _ = model.flow.forward(x)
        ll_traj[sl] = gaussian_log_prob(z, mu0) + logdet
        if use_pose:
            active = np.flatnonzero(gates[sl] > 0)
            if len(active):
                cond = pooled_latent(z[active])
                zp, ldp, _ = model.pose_flow.forward(segments.pose[sl][active], cond)
                ll_pose[a + active] = gaussian_log_prob(zp, mu0) + ldp
    return ll_traj, ll_pose, gates


def score_segments(model: FlowModel, segments: SegmentSet) -> list[SegmentScore]:
    """Per-window anomaly scores (higher is more anomalous)."""
    cfg = model.config
    T, W = segments.features.shape[1], model.width
    ll_traj, ll_pose, gates = segment_log_likelihoods(model, segments)
    traj = normalized_nll(ll_traj, T, W)
    if model.pose_flow is None:
        score = traj
    else:
        score = combined_score(ll_traj, ll_pose, gates, cfg.lam, T, W, POSE_DIM)
    out = []
    for i in range(len(segments)):
        vid, tid, start = segments.provenance[i] if segments.provenance else ("", str(i), 0)
        pose = None
        if model.pose_flow is not None and gates[i] > 0:
            pose = float(normalized_nll(ll_pose[i], T, POSE_DIM))
        out.append(SegmentScore(vid, tid, int(start), T, float(score[i]), float(traj[i]),
                                pose, float(gates[i])))
    return out


def aggregate_frames(scores: list[SegmentScore], meta: VideoMeta, fill: float | None = None,
                     smooth_sigma: float = 0.0, with_pose: bool | None = None) -> FrameScoreSeries:
    """Frame score = max over covering segments.

    Uncovered frames take the video's minimum covered score, or ``fill``
    when the video has no segments at all.  Optional Gaussian smoothing
    (``smooth_sigma`` frames) is applied last.
    """
    F = meta.frame_count
    best = np.full(F, -np.inf)
    traj = np.full(F, -np.inf)
    pose = np.full(F, -np.inf)
    gate = np.zeros(F)
    if with_pose is None:
        with_pose = any(s.gate > 0 or s.pose is not None for s in scores)
    for s in scores:
        lo, hi = max(s.start_frame, 0), min(s.start_frame + s.length, F)
        if hi <= lo:
            continue
        sl = slice(lo, hi)
        np.maximum(best[sl], s.score, out=best[sl])
        np.maximum(traj[sl], s.traj, out=traj[sl])
        if s.pose is not None:
            np.maximum(pose[sl], s.pose, out=pose[sl])
        np.maximum(gate[sl], s.gate, out=gate[sl])
    covered = np.isfinite(best)
    if covered.any():
        best[~covered] = best[covered].min()
        traj[~covered] = traj[covered].min()
    else:
        value = 0.0 if fill is None else fill
        best[:] = value
        traj[:] = value
    pose[~np.isfinite(pose)] = np.nan
    if smooth_sigma > 0:
        best = gaussian_filter1d(best, smooth_sigma, mode="nearest")
    series = FrameScoreSeries(meta.video_id, best, covered)
    if with_pose:
        series.traj, series.pose, series.gate = traj, pose, gate
    return series


def aggregate_all(scores: list[SegmentScore], metas: dict[str, VideoMeta],
                  smooth_sigma: float = 0.0, with_pose: bool = False) -> list[FrameScoreSeries]:
    """Aggregate every video; videos without segments get the global minimum."""
    by_video: dict[str, list[SegmentScore]] = {vid: [] for vid in metas}
    for s in scores:
        by_video.setdefault(s.video_id, []).append(s)
    fill = min((s.score for s in scores), default=0.0)
    out = []
    for vid in sorted(metas):
        out.append(aggregate_frames(by_video[vid], metas[vid], fill, smooth_sigma, with_pose))
    return out
