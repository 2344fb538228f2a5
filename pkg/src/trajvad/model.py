"""Flow model container, likelihood/loss entry points and checkpointing."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import track_io
from .features import EMBED_DIM, FEATURE_NAMES, FEATURE_VERSION, NUM_CLASSES, init_embedding
from .flow import FlowStack, NonFiniteError, gaussian_log_prob
from .preprocess import Standardizer

POSE_DIM = 2 * track_io.NUM_KEYPOINTS


@dataclass
class ModelConfig:
    """Hyperparameter record embedded in every checkpoint."""

    variant: str = "t"
    T: int = 16
    K: int = 6
    K_p: int = 18
    E: int = EMBED_DIM
    C: int = NUM_CLASSES
    mu0: float = 3.0
    lam: float = 1.0
    hidden: int = 64
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    s_max: float = 2.0
    person_class: int = 0
    smooth_radius: int = 2
    gap_tolerance: int = 8
    seed: int = 0
    feature_mask: tuple[bool, ...] = field(default_factory=lambda: (True,) * len(FEATURE_NAMES))

    def __post_init__(self):
        self.variant = self.variant.lower()
        if self.variant not in ("t", "p"):
            raise ValueError(f"variant must be 't' or 'p', got {self.variant!r}")
        self.dilations = tuple(int(d) for d in self.dilations)
        self.feature_mask = tuple(bool(m) for m in self.feature_mask)

    @property
    def d_features(self) -> int:
        return int(sum(self.feature_mask))

    @property
    def width(self) -> int:
        return self.d_features + self.E

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        d["feature_mask"] = list(self.feature_mask)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class FlowModel:
    """All learnable state: trajectory flow, class embeddings, optional pose flow."""

    def __init__(self, config: ModelConfig, standardizer: Standardizer | None = None,
                 n_features: int | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.embedding = init_embedding(rng, config.C, config.E)
        seeds = rng.integers(0, 2**31, size=2)
        self.flow = FlowStack(config.width, config.K, config.hidden, config.kernel,
                              config.dilations, config.s_max, seed=int(seeds[0]))
        self.pose_flow = None
        if config.variant == "p":
            self.pose_flow = FlowStack(POSE_DIM, config.K_p, config.hidden, config.kernel,
                                       config.dilations, config.s_max,
                                       cond_dim=config.width, seed=int(seeds[1]))
        if standardizer is None:
            n = n_features if n_features is not None else len(config.feature_mask)
            standardizer = Standardizer(np.zeros(n), np.ones(n),
                                        np.asarray(config.feature_mask, dtype=bool),
                                        np.zeros(n, dtype=bool))
        self.standardizer = standardizer

    @property
    def width(self) -> int:
        return self.flow.width

    def params(self) -> dict[str, np.ndarray]:
        """Named views onto every learnable array."""
        out = dict(self.flow.params())
        if self.config.E:
            out["embedding.table"] = self.embedding
        if self.pose_flow is not None:
            out.update({f"pose.{k}": v for k, v in self.pose_flow.params().items()})
        return out

    def assemble(self, std_features: np.ndarray, class_ids) -> np.ndarray:
        """Append embedding rows to already-standardized ``(N, T, D_eff)`` features."""
        ids = np.asarray(class_ids)
        if np.any(ids < 0) or np.any(ids >= self.config.C):
            raise IndexError(f"class id out of range [0, {self.config.C - 1}]")
        if not self.config.E:
            return np.asarray(std_features, dtype=np.float64)
        emb = np.broadcast_to(self.embedding[ids][:, None, :],
                              std_features.shape[:2] + (self.config.E,))
        return np.concatenate([std_features, emb], axis=-1)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def actnorm_init(layer, batch) -> None:
    layer.initialize(np.asarray(batch, dtype=np.float64))


def forward(model: FlowModel, x):
    """``(z, logdet)`` for one ``T x W`` segment or a batch of them."""
    xb, single = _batched(x)
    z, logdet, _ = model.flow.forward(xb)
    return (z[0], float(logdet[0])) if single else (z, logdet)


def inverse(model: FlowModel, z):
    zb, single = _batched(z)
    x = model.flow.inverse(zb)
    return x[0] if single else x


def log_likelihood(model: FlowModel, x):
    """``(log p(z) + log|det J|, z)`` under the prior ``N(mu0 * 1, I)``."""
    xb, single = _batched(x)
    z, logdet, _ = model.flow.forward(xb)
    ll = gaussian_log_prob(z, model.config.mu0) + logdet
    return (float(ll[0]), z[0]) if single else (ll, z)


def normalized_nll(ll, T: int, width: int):
    return -ll / (T * width)


def nll_loss(model: FlowModel, x):
    """Per-dimension negative log-likelihood; the trajectory-only anomaly score."""
    xb, single = _batched(x)
    ll, _ = log_likelihood(model, xb)
    out = normalized_nll(ll, xb.shape[1], xb.shape[2])
    return float(out[0]) if single else out


def backward(model: FlowModel, x, class_ids=None, sample_weights=None):
    """Mean normalized NLL of a batch and its exact gradients.

    ``sample_weights`` rescales each sample's contribution (defaults to
    ``1/N``).  When ``class_ids`` is given the gradient reaching the
    embedding columns of ``x`` is accumulated into ``embedding.table``.
    Returns ``(loss, grads)`` with ``grads`` keyed like ``model.params()``
    plus ``"input"`` holding dL/dx.
    """
    xb, single = _batched(x)
    N, T, W = xb.shape
    w = np.full(N, 1.0 / N) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    coef = w / (T * W)
    mu0 = model.config.mu0
    z, logdet, caches = model.flow.forward(xb, keep=True)
    ll = gaussian_log_prob(z, mu0) + logdet
    loss = float(np.dot(coef, -ll))
    gz = coef[:, None, None] * (z - mu0)
    gx, grads = model.flow.backward(caches, gz, -coef)
    grads = dict(grads)
    E = model.config.E
    if E:
        g_table = np.zeros_like(model.embedding)
        if class_ids is not None:
            np.add.at(g_table, np.asarray(class_ids), gx[:, :, W - E:].sum(axis=1))
        grads["embedding.table"] = g_table
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}")
    grads["input"] = gx[0] if single else gx
    return loss, grads


def save_model(model: FlowModel, path, extra: dict | None = None) -> None:
    cfg = model.config
    std = model.standardizer
    header = {
        "model": cfg.to_dict(),
        "feature_names": list(FEATURE_NAMES) if std.n_features == len(FEATURE_NAMES)
        else [f"f{i}" for i in range(std.n_features)],
        "feature_version": FEATURE_VERSION,
        "standardizer": {"mask": std.mask.tolist(), "constant": std.constant.tolist()},
        "actnorm_initialized": model.flow.actnorm.initialized,
        "pose_actnorm_initialized": (model.pose_flow.actnorm.initialized
                                     if model.pose_flow is not None else False),
    }
    if extra:
        header["train"] = json.loads(json.dumps(extra))
    tensors = dict(model.params())
    if not cfg.E:
        tensors["embedding.table"] = model.embedding
    tensors["standardizer.mean"] = std.mean
    tensors["standardizer.std"] = std.std
    track_io.save_checkpoint(path, header, tensors)


def load_model(path) -> FlowModel:
    header, tensors = track_io.load_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model"])
    sh = header["standardizer"]
    std = Standardizer(tensors.pop("standardizer.mean"), tensors.pop("standardizer.std"),
                       np.array(sh["mask"], dtype=bool), np.array(sh["constant"], dtype=bool))
    model = FlowModel(cfg, std)
    params = model.params()
    params.setdefault("embedding.table", model.embedding)
    missing = set(params) - set(tensors)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks tensors {sorted(missing)}")
    for name, arr in params.items():
        arr[...] = tensors[name]
    model.flow.actnorm.initialized = bool(header["actnorm_initialized"])
    if model.pose_flow is not None:
        model.pose_flow.actnorm.initialized = bool(header["pose_actnorm_initialized"])
    model.train_record = header.get("train")
    return model
