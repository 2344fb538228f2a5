"""Invertible density model over ``T x W`` segments.

ActNorm followed by alternating affine couplings.  Each coupling predicts a
scale and shift for one channel half from the other half with a stack of
causal dilated 1-D convolutions over time.  Everything operates on batches
``(N, T, W)`` in float64, and gradients are derived by hand so training
does not need an autodiff framework.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
EPS_STD = 1e-6


class NonFiniteError(ArithmeticError):
    pass


def _check(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _conv(h: np.ndarray, W: np.ndarray, b: np.ndarray, dilation: int) -> np.ndarray:
    """Causal dilated convolution of a time-major ``(T, N, C)`` array.

    Tap ``j`` of the ``(kernel, C, C_out)`` weight reads the input shifted
    back by ``(kernel - 1 - j) * dilation`` frames; reads before the first
    frame replicate it.
    """
    T, N, C = h.shape
    k = W.shape[0]
    out = (h.reshape(T * N, C) @ W[k - 1]).reshape(T, N, -1)
    for j in range(k - 1):
        s = (k - 1 - j) * dilation
        if s < T:
            out[s:] += (h[:T - s].reshape((T - s) * N, C) @ W[j]).reshape(T - s, N, -1)
        out[:min(s, T)] += h[0] @ W[j]
    out += b
    return out


def _conv_backward(h: np.ndarray, g: np.ndarray, W: np.ndarray, dilation: int):
    """Gradients ``(dL/dh, dL/dW, dL/db)`` of :func:`_conv`."""
    T, N, C = h.shape
    k = W.shape[0]
    g2 = g.reshape(T * N, -1)
    gW = np.empty_like(W)
    gW[k - 1] = h.reshape(T * N, C).T @ g2
    gh = (g2 @ W[k - 1].T).reshape(T, N, C)
    for j in range(k - 1):
        s = (k - 1 - j) * dilation
        gW[j] = 0.0
        if s < T:
            gs = g[s:].reshape((T - s) * N, -1)
            gW[j] += h[:T - s].reshape((T - s) * N, C).T @ gs
            gh[:T - s] += (gs @ W[j].T).reshape(T - s, N, C)
        head = g[:min(s, T)].sum(axis=0)
        gW[j] += h[0].T @ head
        gh[0] += head @ W[j].T
    return gh, gW, g2.sum(axis=0)


class CausalConvNet:
    """Three causal convolutions ``in -> H -> H -> out`` with tanh in between.

    Works on time-major ``(T, N, C)`` arrays.  Weights are stored as
    ``(kernel, c_in, c_out)``.  With ``cond_dim > 0`` a linear projection
    of a per-sample conditioning vector is added to the input of every
    convolution at every time step.
    """

    def __init__(self, c_in: int, c_out: int, hidden: int, kernel: int,
                 dilations: tuple[int, ...], rng: np.random.Generator, cond_dim: int = 0):
        widths = [c_in] + [hidden] * (len(dilations) - 1) + [c_out]
        self.kernel = kernel
        self.dilations = tuple(dilations)
        self.widths = widths
        self.weights, self.biases, self.cond = [], [], []
        for i, d in enumerate(dilations):
            fan_in = kernel * widths[i]
            last = i == len(dilations) - 1
            if last:
                W = np.zeros((kernel, widths[i], widths[i + 1]))
            else:
                bound = 1.0 / math.sqrt(fan_in)
                W = rng.uniform(-bound, bound, size=(kernel, widths[i], widths[i + 1]))
            self.weights.append(W)
            self.biases.append(np.zeros(widths[i + 1]))
            if cond_dim:
                bound = 1.0 / math.sqrt(cond_dim)
                self.cond.append(rng.uniform(-bound, bound, size=(cond_dim, widths[i])))

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{i}.weight"] = W
            out[f"{i}.bias"] = b
            if self.cond:
                out[f"{i}.cond"] = self.cond[i]
        return out

    def forward(self, h: np.ndarray, cond: np.ndarray | None = None, keep: bool = False):
        inputs = []
        n_layers = len(self.weights)
        for i in range(n_layers):
            if self.cond:
                h = h + (cond @ self.cond[i])[None]
            inputs.append(h)
            out = _conv(h, self.weights[i], self.biases[i], self.dilations[i])
            h = np.tanh(out, out=out) if i < n_layers - 1 else out
        return h, (inputs if keep else None)

    def backward(self, inputs, gout: np.ndarray, cond: np.ndarray | None, grads: dict, prefix: str):
        """Accumulate parameter gradients into ``grads``; return d(loss)/d(input)."""
        g = gout
        n_layers = len(self.weights)
        for i in reversed(range(n_layers)):
            if i < n_layers - 1:
                # output of layer i is inputs[i+1] minus the conditioning term
                act = inputs[i + 1]
                if self.cond:
                    act = act - (cond @ self.cond[i + 1])[None]
                g = g * (1.0 - act * act)
            g, gW, gb = _conv_backward(inputs[i], g, self.weights[i], self.dilations[i])
            grads[f"{prefix}{i}.weight"] += gW
            grads[f"{prefix}{i}.bias"] += gb
            if self.cond:
                grads[f"{prefix}{i}.cond"] += cond.T @ g.sum(axis=0)
        return g


class ActNorm:
    """Per-channel ``z = (x + bias) * exp(logscale)`` with data-dependent init."""

    def __init__(self, width: int):
        self.bias = np.zeros(width)
        self.logscale = np.zeros(width)
        self.initialized = False

    def params(self) -> dict[str, np.ndarray]:
        return {"bias": self.bias, "logscale": self.logscale}

    def initialize(self, batch: np.ndarray, eps: float = EPS_STD) -> None:
        if self.initialized:
            return
        x = np.asarray(batch, dtype=np.float64).reshape(-1, batch.shape[-1])
        if x.shape[0] < 2:
            raise ValueError("ActNorm initialization needs at least two frames")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        flat = std < eps
        if flat.any():
            logger.warning("ActNorm: %d zero-variance channel(s) keep unit scale", int(flat.sum()))
        self.bias[:] = -mean
        self.logscale[:] = np.where(flat, 0.0, -np.log(std + eps))
        self.initialized = True


class AffineCoupling:
    """Transform one channel half with scale/shift predicted from the other.

    ``parity`` 0 conditions on the first ``ceil(W/2)`` channels, parity 1 on
    the remainder.  The scale is soft-clamped to ``|s| < s_max``.
    """

    def __init__(self, width: int, parity: int, hidden: int, kernel: int,
                 dilations: tuple[int, ...], s_max: float, rng: np.random.Generator,
                 cond_dim: int = 0):
        half = (width + 1) // 2
        first, second = slice(0, half), slice(half, width)
        self.parity = parity
        self.cond_idx, self.tran_idx = (first, second) if parity == 0 else (second, first)
        n_cond = half if parity == 0 else width - half
        self.s_max = s_max
        n_in, n_out = n_cond, width - n_cond
        self.s_net = CausalConvNet(n_in, n_out, hidden, kernel, dilations, rng, cond_dim)
        self.t_net = CausalConvNet(n_in, n_out, hidden, kernel, dilations, rng, cond_dim)

    def params(self) -> dict[str, np.ndarray]:
        out = {f"s.{k}": v for k, v in self.s_net.params().items()}
        out.update({f"t.{k}": v for k, v in self.t_net.params().items()})
        return out

    def _scale_shift(self, u, cond, keep=False):
        raw, s_cache = self.s_net.forward(u, cond, keep)
        s = self.s_max * np.tanh(raw / self.s_max)
        t, t_cache = self.t_net.forward(u, cond, keep)
        return s, t, s_cache, t_cache

    def forward(self, x, cond=None, keep=False):
        u = np.ascontiguousarray(x[..., self.cond_idx])
        v = x[..., self.tran_idx]
        s, t, s_cache, t_cache = self._scale_shift(u, cond, keep)
        es = np.exp(s)
        y = np.empty_like(x)
        y[..., self.cond_idx] = u
        y[..., self.tran_idx] = v * es + t
        logdet = s.sum(axis=(0, 2))
        cache = (u, v, s, es, s_cache, t_cache) if keep else None
        return y, logdet, cache

    def inverse(self, y, cond=None):
        u = np.ascontiguousarray(y[..., self.cond_idx])
        s, t, _, _ = self._scale_shift(u, cond)
        x = np.empty_like(y)
        x[..., self.cond_idx] = u
        x[..., self.tran_idx] = (y[..., self.tran_idx] - t) * np.exp(-s)
        return x

    def backward(self, cache, gy, glogdet, cond, grads, prefix):
        u, v, s, es, s_cache, t_cache = cache
        gu = np.ascontiguousarray(gy[..., self.cond_idx])
        gvp = gy[..., self.tran_idx]
        gx = np.empty_like(gy)
        gx[..., self.tran_idx] = gvp * es
        gs = gvp * v * es + glogdet[None, :, None]
        graw = gs * (1.0 - (s / self.s_max) ** 2)
        gu += self.s_net.backward(s_cache, graw, cond, grads, prefix + "s.")
        gu += self.t_net.backward(t_cache, gvp, cond, grads, prefix + "t.")
        gx[..., self.cond_idx] = gu
        return gx


@dataclass
class FlowStack:
    """ActNorm plus ``K`` couplings; optionally conditioned on a fixed vector."""

    width: int
    n_couplings: int
    hidden: int = 64
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    s_max: float = 2.0
    cond_dim: int = 0
    seed: int = 0
    actnorm: ActNorm = field(init=False)
    couplings: list[AffineCoupling] = field(init=False)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        self.actnorm = ActNorm(self.width)
        self.couplings = []
        n = len(self.dilations)
        for i in range(self.n_couplings):
            # rotate the dilation cycle so deeper couplings start at a larger dilation
            dil = tuple(self.dilations[(i + j) % n] for j in range(n))
            self.couplings.append(AffineCoupling(
                self.width, i % 2, self.hidden, self.kernel, dil, self.s_max, rng, self.cond_dim))

    def params(self) -> dict[str, np.ndarray]:
        out = {f"actnorm.{k}": v for k, v in self.actnorm.params().items()}
        for i, c in enumerate(self.couplings):
            out.update({f"coupling.{i}.{k}": v for k, v in c.params().items()})
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params().items()}

    def forward(self, x, cond=None, keep=False):
        """Return ``(z, logdet, cache)`` for a batch ``x`` of shape (N, T, W).

        Couplings run on a time-major copy; ``z`` comes back as (N, T, W).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.width:
            raise ValueError(f"input width {x.shape[-1]} does not match flow width {self.width}")
        xt = np.ascontiguousarray(x.transpose(1, 0, 2))
        T = xt.shape[0]
        an = self.actnorm
        sigma = np.exp(an.logscale)
        h = (xt + an.bias) * sigma
        logdet = np.full(x.shape[0], T * an.logscale.sum())
        _check(h, "actnorm output")
        caches = [xt] if keep else None
        for i, c in enumerate(self.couplings):
            h, ld, cache = c.forward(h, cond, keep)
            _check(h, f"coupling layer {i}")
            logdet = logdet + ld
            if keep:
                caches.append(cache)
        return h.transpose(1, 0, 2), logdet, caches

    def inverse(self, z, cond=None):
        h = np.ascontiguousarray(np.asarray(z, dtype=np.float64).transpose(1, 0, 2))
        for i in reversed(range(len(self.couplings))):
            h = self.couplings[i].inverse(h, cond)
            _check(h, f"inverse of coupling layer {i}")
        an = self.actnorm
        return (h * np.exp(-an.logscale) - an.bias).transpose(1, 0, 2)

    def backward(self, caches, gz, glogdet, cond=None, grads=None):
        """Back-propagate ``dL/dz`` (N, T, W) and ``dL/dlogdet`` (per sample).

        Returns ``(dL/dx, grads)`` with ``grads`` keyed like :meth:`params`.
        """
        grads = self.zero_grads() if grads is None else grads
        g = np.ascontiguousarray(np.asarray(gz).transpose(1, 0, 2))
        glogdet = np.asarray(glogdet, dtype=np.float64)
        for i in reversed(range(len(self.couplings))):
            g = self.couplings[i].backward(caches[i + 1], g, glogdet, cond, grads, f"coupling.{i}.")
        xt = caches[0]
        an = self.actnorm
        sigma = np.exp(an.logscale)
        T = xt.shape[0]
        grads["actnorm.bias"] += (g * sigma).sum(axis=(0, 1))
        grads["actnorm.logscale"] += (g * (xt + an.bias) * sigma).sum(axis=(0, 1)) + T * glogdet.sum()
        return (g * sigma).transpose(1, 0, 2), grads


def gaussian_log_prob(z: np.ndarray, mu0: float) -> np.ndarray:
    """Per-sample log density of ``N(mu0 * 1, I)`` over the trailing two axes."""
    d = z - mu0
    n = z.shape[-1] * z.shape[-2]
    return -0.5 * (d * d).sum(axis=(-1, -2)) - 0.5 * n * LOG_2PI
