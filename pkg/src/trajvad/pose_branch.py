"""Pose-gated extension: pose normalization, reliability gate and fused score.

The pose flow is a :class:`~trajvad.flow.FlowStack` whose subnets receive
the time-averaged trajectory latent as a conditioning vector.  The latent
is treated as a constant, so pose-flow gradients never reach the
trajectory flow.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowStack, gaussian_log_prob
from .preprocess import Window
from .track_io import NUM_KEYPOINTS

LEFT_HIP, RIGHT_HIP = 11, 12
EPS = 1e-8
PERSON_CLASS = 0


@dataclass
class PoseWindow:
    keypoints: np.ndarray      # (T, 2J) pelvis-centred, box-height scaled
    confidences: np.ndarray    # (T, J)
    present: np.ndarray        # (T,) bool
    mean_conf: float


@dataclass(frozen=True)
class Gate:
    g_cls: int
    g_valid: int
    mean_conf: float

    @property
    def value(self) -> float:
        return self.g_cls * self.g_valid * self.mean_conf


def normalize_pose(window: Window) -> PoseWindow:
    """Centre keypoints on the hip midpoint and divide by box height.

    Keypoints are in resolution-normalized image coordinates, so the
    horizontal and vertical axes are rescaled by the same box height; the
    result is independent of where the person stands and of the box scale.
    """
    T = window.length
    J = NUM_KEYPOINTS
    out = np.zeros((T, 2 * J))
    conf = np.zeros((T, J))
    present = np.zeros(T, dtype=bool)
    if window.keypoints is not None and window.pose_present is not None:
        present = window.pose_present.copy()
        kp = window.keypoints.reshape(T, J, 2)
        pelvis = 0.5 * (kp[:, LEFT_HIP] + kp[:, RIGHT_HIP])
        h = window.boxes[:, 3]
        norm = (kp - pelvis[:, None, :]) / (h[:, None, None] + EPS)
        out[present] = norm.reshape(T, 2 * J)[present]
        conf[present] = window.keypoint_conf[present]
    mean_conf = float(conf[present].mean()) if present.any() else 0.0
    return PoseWindow(out, conf, present, mean_conf)


def compute_gate(window: Window, person_class_id: int = PERSON_CLASS,
                 pose: PoseWindow | None = None) -> Gate:
    g_cls = int(window.class_id == person_class_id)
    g_valid = int(window.fully_posed)
    if pose is None:
        pose = normalize_pose(window)
    return Gate(g_cls, g_valid, pose.mean_conf)


def pooled_latent(z_traj: np.ndarray) -> np.ndarray:
    """Time-average of the trajectory latent, ``(N, T, W) -> (N, W)``."""
    return np.asarray(z_traj).mean(axis=-2)


def pose_log_likelihood(pflow: FlowStack, pose, z_traj, mu0: float = 3.0):
    """Log-likelihood of pose keypoints given the trajectory latent.

    ``pose`` is a :class:`PoseWindow`, a ``T x 2J`` array or a batch
    ``(N, T, 2J)``; ``z_traj`` must have the matching batch shape.
    """
    p = pose.keypoints if isinstance(pose, PoseWindow) else np.asarray(pose, dtype=np.float64)
    z_traj = np.asarray(z_traj, dtype=np.float64)
    single = p.ndim == 2
    if single:
        p, z_traj = p[None], z_traj[None]
    cond = pooled_latent(z_traj)
    zp, logdet, _ = pflow.forward(p, cond)
    ll = gaussian_log_prob(zp, mu0) + logdet
    return float(ll[0]) if single else ll


def combined_score(ll_traj, ll_pose, g, lam: float = 1.0, T: int = 16,
                   d_traj: int = 30, d_pose: int = 2 * NUM_KEYPOINTS):
    """Gated fusion of trajectory and pose log-likelihoods, per dimension.

    With ``g == 0`` (or no pose likelihood) the result is the trajectory
    score computed by the same expression as the trajectory-only model.
    """
    if lam < 0:
        raise ValueError("pose weight must be non-negative")
    ll_traj = np.asarray(ll_traj, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    traj_only = -ll_traj / (T * d_traj)
    if ll_pose is None:
        out = traj_only
    else:
        ll_pose = np.where(g > 0, np.asarray(ll_pose, dtype=np.float64), 0.0)
        fused = -(ll_traj + lam * g * ll_pose) / (T * (d_traj + d_pose * g))
        out = np.where(g > 0, fused, traj_only)
    return float(out) if out.ndim == 0 else out
