"""Per-frame bounding-box trajectory features and flow-input assembly.

Every window yields a ``T x 27`` matrix in six groups: State (6), Temporal
dynamics (10), Geometric dynamics (2), Pseudo-physical (2), Perspective-
normalized (6) and Confidence (1).  Differences use a one-frame step; the
leading frames of each derivative order copy its first defined value.
"""
from __future__ import annotations

import numpy as np

from .preprocess import Standardizer, Window, apply_standardizer

EPS = 1e-8
EPS_DIRECTION = 1e-6
PATH_HORIZON = 8
FEATURE_VERSION = 1

FEATURE_GROUPS: dict[str, tuple[str, ...]] = {
    "state": ("cx", "cy", "w", "h", "area", "ratio"),
    "temporal": ("vx", "vy", "speed", "ax", "ay", "acc", "sin_theta", "cos_theta",
                 "jerk", "curvature"),
    "geometric": ("expansion", "ratio_velocity"),
    "physical": ("kinetic", "path_efficiency"),
    "perspective": ("speed_h", "speed_w", "speed_area", "acc_h", "acc_w", "acc_area"),
    "confidence": ("conf",),
}
FEATURE_NAMES: tuple[str, ...] = tuple(n for g in FEATURE_GROUPS.values() for n in g)
NUM_FEATURES = len(FEATURE_NAMES)

NUM_CLASSES = 80
EMBED_DIM = 3


class FeatureError(ArithmeticError):
    pass


def group_mask(*drop: str) -> np.ndarray:
    """Boolean mask over the 27 features with the named groups removed."""
    mask = np.ones(NUM_FEATURES, dtype=bool)
    for name in drop:
        if name not in FEATURE_GROUPS:
            raise KeyError(f"unknown feature group {name!r}; choose from {sorted(FEATURE_GROUPS)}")
        for feat in FEATURE_GROUPS[name]:
            mask[FEATURE_NAMES.index(feat)] = False
    if not mask.any():
        raise ValueError("mask removes every feature")
    return mask


def _diff(x: np.ndarray, order_start: int) -> np.ndarray:
    """First difference along axis 0, back-filling frames before the first defined one.

    ``x`` is assumed defined from index ``order_start - 1``; the result is
    defined from ``order_start``.
    """
    out = np.zeros_like(x)
    if len(x) > order_start:
        out[order_start:] = x[order_start:] - x[order_start - 1:-1]
        out[:order_start] = out[order_start]
    return out


def compute_features(window: Window | np.ndarray, confidences=None) -> np.ndarray:
    """Return the ``T x 27`` feature matrix of a smoothed, normalized window.

    Accepts a :class:`Window` or a raw ``T x 4`` box array plus confidences.
    """
    if isinstance(window, Window):
        boxes, conf = window.boxes, window.confidences
    else:
        boxes, conf = np.asarray(window, dtype=np.float64), np.asarray(confidences, dtype=np.float64)
    T = len(boxes)
    cx, cy, w, h = (boxes[:, i] for i in range(4))
    area = w * h
    ratio = w / (h + EPS)

    vx, vy = _diff(cx, 1), _diff(cy, 1)
    speed = np.hypot(vx, vy)
    ax, ay = _diff(vx, 2), _diff(vy, 2)
    acc = np.hypot(ax, ay)
    jerk = np.hypot(_diff(ax, 3), _diff(ay, 3))
    curvature = np.abs(vx * ay - vy * ax) / (speed ** 3 + EPS)

    sin_t = np.empty(T)
    cos_t = np.empty(T)
    prev = (0.0, 1.0)
    for t in range(T):
        if speed[t] >= EPS_DIRECTION:
            prev = (vy[t] / speed[t], vx[t] / speed[t])
        sin_t[t], cos_t[t] = prev

    expansion = _diff(area, 1) / (np.concatenate([area[:1], area[:-1]]) + EPS)
    if T > 1:
        expansion[0] = expansion[1]
    ratio_vel = _diff(ratio, 1)

    kinetic = area * speed ** 2
    steps = np.zeros(T)
    steps[1:] = np.hypot(np.diff(cx), np.diff(cy))
    cum = np.cumsum(steps)
    path_eff = np.ones(T)
    for t in range(1, T):
        m = min(t, PATH_HORIZON)
        travelled = cum[t] - cum[t - m]
        if travelled > EPS:
            disp = np.hypot(cx[t] - cx[t - m], cy[t] - cy[t - m])
            path_eff[t] = disp / (travelled + EPS)

    feats = np.stack([
        cx, cy, w, h, area, ratio,
        vx, vy, speed, ax, ay, acc, sin_t, cos_t, jerk, curvature,
        expansion, ratio_vel,
        kinetic, path_eff,
        speed / (h + EPS), speed / (w + EPS), speed / (area + EPS),
        acc / (h + EPS), acc / (w + EPS), acc / (area + EPS),
        np.asarray(conf, dtype=np.float64),
    ], axis=1)
    bad = ~np.isfinite(feats)
    if bad.any():
        t, j = np.argwhere(bad)[0]
        raise FeatureError(f"non-finite feature {FEATURE_NAMES[j]!r} at frame {t}")
    return feats


def init_embedding(rng: np.random.Generator, num_classes: int = NUM_CLASSES,
                   dim: int = EMBED_DIM) -> np.ndarray:
    return rng.normal(0.0, 0.1, size=(num_classes, dim))


def assemble_input(features, class_id, table: np.ndarray, std: Standardizer) -> np.ndarray:
    """Standardize features (mask applied) and append the class embedding row.

    ``features`` may be ``T x D`` with a scalar ``class_id`` or ``N x T x D``
    with one class id per window.
    """
    z = apply_standardizer(std, features)
    ids = np.asarray(class_id)
    if np.any(ids < 0) or np.any(ids >= len(table)):
        raise IndexError(f"class id out of range [0, {len(table) - 1}]")
    emb = table[ids]
    if z.ndim == 2:
        e = np.broadcast_to(emb, (z.shape[0], table.shape[1]))
    else:
        e = np.broadcast_to(emb[:, None, :], z.shape[:2] + (table.shape[1],))
    return np.concatenate([z, e], axis=-1)
