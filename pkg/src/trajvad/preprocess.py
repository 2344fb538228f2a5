"""Track smoothing, fixed-length windowing and feature standardization."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .track_io import Track

SMOOTH_RADIUS = 2
EPS_STD = 1e-6


@dataclass
class Window:
    """A ``length``-frame slice of one track.

    Pose arrays are ``None`` when the track never had pose attached;
    ``pose_present`` then reads as all False.
    """

    track: Track
    start_frame: int
    boxes: np.ndarray
    confidences: np.ndarray
    keypoints: np.ndarray | None = None
    keypoint_conf: np.ndarray | None = None
    pose_present: np.ndarray | None = None

    @property
    def length(self) -> int:
        return len(self.boxes)

    @property
    def class_id(self) -> int:
        return self.track.class_id

    @property
    def fully_posed(self) -> bool:
        return self.pose_present is not None and bool(self.pose_present.all())


def moving_average(values: np.ndarray, radius: int) -> np.ndarray:
    """Centered moving average along axis 0 with windows shrinking at the ends."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if radius <= 0 or n <= 1:
        return values.copy()
    # averaging offsets from the first row keeps constant input an exact fixed point
    ref = values[0]
    csum = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values - ref, axis=0)])
    idx = np.arange(n)
    lo = np.maximum(idx - radius, 0)
    hi = np.minimum(idx + radius + 1, n)
    counts = (hi - lo).reshape((-1,) + (1,) * (values.ndim - 1))
    return ref + (csum[hi] - csum[lo]) / counts


def smooth_track(track: Track, radius: int = SMOOTH_RADIUS) -> Track:
    """Moving-average the box coordinates; confidences and pose are untouched."""
    if len(track) <= 1:
        return replace(track, boxes=track.boxes.copy())
    boxes = np.clip(moving_average(track.boxes, radius), 0.0, 1.0)
    return replace(track, boxes=boxes)


def segment_track(track: Track, T: int = 16, stride: int = 1) -> list[Window]:
    if T < 2 or stride < 1:
        raise ValueError("need T >= 2 and stride >= 1")
    out = []
    for off in range(0, len(track) - T + 1, stride):
        sl = slice(off, off + T)
        out.append(Window(
            track=track,
            start_frame=track.start_frame + off,
            boxes=track.boxes[sl],
            confidences=track.confidences[sl],
            keypoints=None if track.keypoints is None else track.keypoints[sl],
            keypoint_conf=None if track.keypoint_conf is None else track.keypoint_conf[sl],
            pose_present=None if track.pose_present is None else track.pose_present[sl],
        ))
    return out


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    mask: np.ndarray
    constant: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.mean)

    @property
    def n_active(self) -> int:
        return int(self.mask.sum())

    def with_mask(self, mask) -> "Standardizer":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.mean.shape:
            raise ValueError(f"mask has {mask.size} entries, expected {self.n_features}")
        if not mask.any():
            raise ValueError("feature mask removes every feature")
        return replace(self, mask=mask)


def fit_standardizer(features, mask=None, eps: float = EPS_STD) -> Standardizer:
    """Column means and population standard deviations of an ``N x D`` matrix.

    A column is flagged constant when its std is below ``eps`` times its
    root-mean-square value (or it is all zeros).  Flagged columns keep std 1
    and standardize to zero on the fit data.  The relative test matters for
    features such as kinetic energy whose natural scale is ~1e-7.
    """
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    if x.shape[0] < 2:
        raise ValueError("fit_standardizer needs at least 2 rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    rms = np.sqrt(np.mean(x * x, axis=0))
    constant = (std < eps * rms) | (rms == 0)
    std = np.where(constant, 1.0, std)
    mask = np.ones(x.shape[1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != mean.shape:
        raise ValueError(f"mask has {mask.size} entries, expected {mean.size}")
    if not mask.any():
        raise ValueError("feature mask removes every feature")
    return Standardizer(mean=mean, std=std, mask=mask, constant=constant)


def apply_standardizer(std: Standardizer, features) -> np.ndarray:
    """Standardize the last axis and drop masked columns."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != std.n_features:
        raise ValueError(f"feature width {x.shape[-1]} does not match standardizer {std.n_features}")
    z = (x - std.mean) / std.std
    return z[..., std.mask]
