"""Mini-batch maximum-likelihood training on normal segments."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .features import FEATURE_NAMES, group_mask
from .flow import gaussian_log_prob
from .model import POSE_DIM, FlowModel, ModelConfig
from .pose_branch import pooled_latent
from .preprocess import apply_standardizer, fit_standardizer

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 8
    lr: float = 5e-4
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 10.0
    seed: int = 0
    variant: str = "t"
    lam: float = 1.0
    K: int = 6
    K_p: int = 18
    T: int = 16
    E: int = 3
    C: int = 80
    mu0: float = 3.0
    hidden: int = 64
    s_max: float = 2.0
    person_class: int = 0
    val_fraction: float = 0.0   # held-out normal fraction for validation NLL, 0 = off
    patience: int = 0           # stop after this many epochs without validation gain, 0 = never
    feature_mask: tuple[bool, ...] = field(default_factory=lambda: (True,) * len(FEATURE_NAMES))

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.variant = self.variant.lower()
        self.feature_mask = tuple(bool(m) for m in self.feature_mask)

    def model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, T=self.T, K=self.K, K_p=self.K_p, E=self.E,
                           C=self.C, mu0=self.mu0, lam=self.lam, hidden=self.hidden,
                           s_max=self.s_max, person_class=self.person_class, seed=self.seed,
                           feature_mask=self.feature_mask)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["feature_mask"] = list(self.feature_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SegmentSet:
    """Training or test segments.

    ``features`` are raw (unstandardized) ``(N, T, D)`` trajectory features.
    ``pose`` and ``gates`` are present for the pose-gated variant.
    """

    features: np.ndarray
    class_ids: np.ndarray
    pose: np.ndarray | None = None
    gates: np.ndarray | None = None
    provenance: list[tuple[str, str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / (total - 1)))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm at most ``max_norm``; return the pre-clip norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


def batch_loss_and_grads(model: FlowModel, x, class_ids, pose=None, gates=None):
    """Mean fused loss over a batch and gradients for every parameter.

    Without pose data this is the trajectory-only normalized NLL.  With
    pose data each sample contributes ``-(l_traj + lam*g*l_pose) /
    (T*(W + 2J*g))``; samples with ``g == 0`` never enter the pose flow.
    """
    cfg = model.config
    N, T, W = x.shape
    mu0 = cfg.mu0
    g = np.zeros(N) if gates is None or model.pose_flow is None else np.asarray(gates, dtype=np.float64)
    denom = T * (W + POSE_DIM * g)
    z, logdet, caches = model.flow.forward(x, keep=True)
    ll = gaussian_log_prob(z, mu0) + logdet
    c_traj = 1.0 / (N * denom)
    gz = c_traj[:, None, None] * (z - mu0)
    gx, grads = model.flow.backward(caches, gz, -c_traj)
    grads = dict(grads)
    total = ll.copy()

    active = np.flatnonzero(g > 0)
    if model.pose_flow is not None:
        pose_grads = model.pose_flow.zero_grads()
        if len(active):
            cond = pooled_latent(z[active])
            zp, ldp, pc = model.pose_flow.forward(pose[active], cond, keep=True)
            llp = gaussian_log_prob(zp, mu0) + ldp
            c_pose = cfg.lam * g[active] / (N * denom[active])
            gzp = c_pose[:, None, None] * (zp - mu0)
            _, pose_grads = model.pose_flow.backward(pc, gzp, -c_pose, cond, pose_grads)
            total[active] += cfg.lam * g[active] * llp
        grads.update({f"pose.{k}": v for k, v in pose_grads.items()})

    if cfg.E:
        g_table = np.zeros_like(model.embedding)
        np.add.at(g_table, np.asarray(class_ids), gx[:, :, W - cfg.E:].sum(axis=1))
        grads["embedding.table"] = g_table
    loss = float(np.sum(-total / denom) / N)
    return loss, grads


def _split_validation(config: TrainConfig, segments: SegmentSet):
    """Seeded hold-out of ``val_fraction`` of the segments; returns (train, val or None)."""
    if config.val_fraction <= 0:
        return segments, None
    N = len(segments)
    n_val = max(1, int(round(N * config.val_fraction)))
    order = np.random.default_rng([config.seed, 1]).permutation(N)

    def take(idx):
        idx = np.sort(idx)
        pick = (lambda a: None if a is None else a[idx])
        prov = [segments.provenance[i] for i in idx] if segments.provenance else []
        return SegmentSet(segments.features[idx], np.asarray(segments.class_ids)[idx],
                          pick(segments.pose), pick(segments.gates), prov)

    return take(order[n_val:]), take(order[:n_val])


def mean_loss(model: FlowModel, segments: SegmentSet, chunk: int = 512) -> float:
    """Mean training objective over ``segments`` without gradients."""
    X = apply_standardizer(model.standardizer, segments.features)
    ids = np.asarray(segments.class_ids)
    cfg = model.config
    total = 0.0
    for a in range(0, len(segments), chunk):
        sl = slice(a, a + chunk)
        x = model.assemble(X[sl], ids[sl])
        N, T, W = x.shape
        z, logdet, _ = model.flow.forward(x)
        ll = gaussian_log_prob(z, cfg.mu0) + logdet
        g = np.zeros(N)
        if model.pose_flow is not None and segments.gates is not None:
            g = np.asarray(segments.gates[sl], dtype=np.float64)
            act = np.flatnonzero(g > 0)
            if len(act):
                zp, ldp, _ = model.pose_flow.forward(segments.pose[sl][act], pooled_latent(z[act]))
                ll[act] += cfg.lam * g[act] * (gaussian_log_prob(zp, cfg.mu0) + ldp)
        total += float(np.sum(-ll / (T * (W + POSE_DIM * g))))
    return total / len(segments)


def _init_actnorms(model: FlowModel, x0, segments: SegmentSet, first_idx, order, batch_size):
    model.flow.actnorm.initialize(x0)
    if model.pose_flow is None:
        return
    if segments.gates is None or segments.pose is None:
        raise ValueError("pose-gated training needs pose windows and gates")
    valid = first_idx[segments.gates[first_idx] > 0]
    if len(valid) == 0:
        # first batch carries no usable pose: fall back to the next gated windows
        ordered = order[segments.gates[order] > 0]
        valid = ordered[:batch_size]
    if len(valid) == 0:
        logger.warning("no gated pose windows in training data; pose flow left at identity")
        return
    model.pose_flow.actnorm.initialize(segments.pose[valid])


def train(config: TrainConfig, segments: SegmentSet, log_every: int = 0) -> FlowModel:
    """Fit a flow model to normal segments and return it.

    The returned model carries ``history`` (per-epoch mean loss),
    ``val_history`` (validation loss, empty unless ``val_fraction > 0``) and
    ``train_config``.  Results are bitwise reproducible for a fixed seed.
    With ``patience > 0`` training stops early and the best-validation
    parameters are restored.
    """
    if len(segments) == 0:
        raise ValueError("no training segments")
    segments, val = _split_validation(config, segments)
    N = len(segments)
    if N < config.batch_size:
        raise ValueError(f"need at least one full batch ({config.batch_size}) of segments, got {N}")
    if config.variant == "p" and (segments.pose is None or segments.gates is None):
        raise ValueError("pose-gated training needs pose windows and gates")
    mcfg = config.model_config()
    if len(mcfg.feature_mask) != segments.features.shape[-1]:
        raise ValueError(f"feature mask has {len(mcfg.feature_mask)} entries but segments "
                         f"carry {segments.features.shape[-1]} features")
    bad = np.flatnonzero(~np.isfinite(segments.features).all(axis=(1, 2)))
    if len(bad):
        where = [segments.provenance[i] for i in bad[:5]] if segments.provenance else list(bad[:5])
        raise FloatingPointError(f"{len(bad)} segment(s) with non-finite features, first {where}")
    std = fit_standardizer(segments.features, mask=mcfg.feature_mask)
    model = FlowModel(mcfg, std)
    X = apply_standardizer(std, segments.features)
    ids = np.asarray(segments.class_ids)

    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(N / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    params = model.params()
    opt = Adam(params, config.beta1, config.beta2)
    history, val_history = [], []
    best, best_params, stale = math.inf, None, 0
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        epoch_sum = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            x = model.assemble(X[idx], ids[idx])
            if step == 0:
                _init_actnorms(model, x, segments, idx, order, config.batch_size)
            pose = gates = None
            if model.pose_flow is not None:
                pose, gates = segments.pose[idx], segments.gates[idx]
            loss, grads = batch_loss_and_grads(model, x, ids[idx], pose,
                                               None if gates is None else gates)
            if not math.isfinite(loss):
                where = [segments.provenance[i] for i in idx[:5]] if segments.provenance else list(idx[:5])
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {b}; batch starts with {where}")
            clip_gradients(grads, config.clip_norm)
            opt.step(grads, cosine_lr(step, total_steps, config.lr, config.lr_min))
            epoch_sum += loss * len(idx)
            step += 1
            if log_every and step % log_every == 0:
                logger.info("step %d loss %.4f", step, loss)
        history.append(epoch_sum / N)
        logger.info("epoch %d mean loss %.5f", epoch, history[-1])
        if val is not None:
            val_history.append(mean_loss(model, val))
            logger.info("epoch %d validation loss %.5f", epoch, val_history[-1])
            if config.patience > 0:
                if val_history[-1] < best:
                    best, stale = val_history[-1], 0
                    best_params = {k: v.copy() for k, v in params.items()}
                else:
                    stale += 1
                    if stale >= config.patience:
                        logger.info("early stop after epoch %d", epoch)
                        break
    if best_params is not None:
        for k, v in best_params.items():
            params[k][...] = v
    model.history = history
    model.val_history = val_history
    model.train_config = config
    return model


def train_ablation(config: TrainConfig, segments: SegmentSet, drop_groups) -> FlowModel:
    """Train with the named feature groups removed (leave-one-group-out)."""
    if isinstance(drop_groups, str):
        drop_groups = (drop_groups,)
    mask = group_mask(*drop_groups)
    cfg = TrainConfig.from_dict({**config.to_dict(), "feature_mask": list(mask)})
    return train(cfg, segments)
