"""Micro-averaged frame-level AUROC / AP.

Tie conventions: AUROC counts a tied positive/negative pair as one half;
AP evaluates precision once per block of tied scores and is summed exactly
when the number of blocks that contain positives is moderate.
"""
from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .track_io import FrameScoreSeries, GroundTruth

EXACT_AP_BLOCKS = 4096


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    y = y.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("AUROC/AP undefined: labels contain a single class")
    return s, y, n_pos


def auroc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties = 1/2)."""
    s, y, n_pos = _validate(scores, labels)
    n_neg = len(y) - n_pos
    ranks = rankdata(s)  # average ranks; half-integers, exact in float64
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def ap(scores, labels) -> float:
    """Average precision from a descending sweep over distinct score values."""
    s, y, n_pos = _validate(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every tie block
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, len(s) - 1)
    tp = np.cumsum(y)[ends]
    seen = ends + 1
    dtp = np.diff(np.concatenate([[0], tp]))
    hit = dtp > 0
    if hit.sum() <= EXACT_AP_BLOCKS:
        # exact rational sum, rounded once
        total = sum((Fraction(int(d) * int(t), int(n)) for d, t, n in
                     zip(dtp[hit], tp[hit], seen[hit])), Fraction(0))
        return float(total / n_pos)
    terms = (dtp[hit] / n_pos) * (tp[hit] / seen[hit])
    return math.fsum(terms.tolist())


def concat_series(series: Sequence[FrameScoreSeries] | dict, truths: dict[str, GroundTruth],
                  hr_only: bool = False):
    """Concatenate scores and labels over videos in sorted video order."""
    if isinstance(series, dict):
        items = sorted(series.items())
    else:
        items = sorted(((s.video_id, s.scores) for s in series), key=lambda kv: kv[0])
    scores, labels = [], []
    for vid, sc in items:
        gt = truths.get(vid)
        if gt is None:
            raise KeyError(f"no ground truth for video {vid!r}")
        if len(gt.labels) != len(sc):
            raise ValueError(f"video {vid!r}: {len(sc)} scores vs {len(gt.labels)} labels")
        sc = np.asarray(sc)
        lab = np.asarray(gt.labels)
        if hr_only:
            if gt.hr_mask is None:
                raise ValueError(f"video {vid!r} has no HR mask")
            keep = np.asarray(gt.hr_mask).astype(bool)
            sc, lab = sc[keep], lab[keep]
        scores.append(sc)
        labels.append(lab)
    return np.concatenate(scores), np.concatenate(labels)


def filter_hr(series, truths: dict[str, GroundTruth]):
    """Scores and labels restricted to human-related frames, order preserved."""
    missing = [vid for vid, gt in truths.items() if gt.hr_mask is None]
    if missing:
        raise ValueError(f"HR evaluation requested but videos {missing[:3]} have no HR mask")
    s, y = concat_series(series, truths, hr_only=True)
    if len(s) == 0:
        raise ValueError("HR mask selects no frames")
    return s, y


def evaluate(series, truths: dict[str, GroundTruth]) -> dict[str, float]:
    """Overall and (when masks exist) HR-subset AUROC and AP."""
    s, y = concat_series(series, truths)
    report = {"auroc": auroc(s, y), "ap": ap(s, y), "frames": float(len(y)),
              "positives": float(y.sum())}
    if all(gt.hr_mask is not None for gt in truths.values()):
        hs, hy = filter_hr(series, truths)
        if 0 < hy.sum() < len(hy):
            report.update({"hr_auroc": auroc(hs, hy), "hr_ap": ap(hs, hy),
                           "hr_frames": float(len(hy))})
    return report


def format_report(report: dict[str, float]) -> str:
    """Machine-readable ``key=value`` block followed by a short table."""
    lines = [f"{k}={report[k]!r}" for k in sorted(report)]
    lines.append("")
    lines.append(f"{'subset':<8}{'AUROC':>10}{'AP':>10}")
    lines.append(f"{'all':<8}{100 * report['auroc']:>10.2f}{100 * report['ap']:>10.2f}")
    if "hr_auroc" in report:
        lines.append(f"{'HR':<8}{100 * report['hr_auroc']:>10.2f}{100 * report['hr_ap']:>10.2f}")
    return "\n".join(lines) + "\n"
