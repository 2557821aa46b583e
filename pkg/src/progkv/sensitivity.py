"""First-order Taylor sensitivity of a loss to KV quantization.

For block ``i`` and width ``b``::

    s[i, b] = sum |G_K * (K - Q_b(K))| + sum |G_V * (V - Q_b(V))|

Gradients are inputs. They can come from any external profiler as tensor
files, or from :func:`attention_loss_and_grads`, a self-contained toy loss
``0.5 * ||softmax(Q K^T / sqrt(d)) V - T||^2`` with analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import CacheConfig, Ledger
from .errors import ConfigError, NumericError
from .quant import GroupSpec, fake_quant
from .tensorio import Tensor, synth_kv_arrays, synth_queries

DEFAULT_KEY_GROUPS = GroupSpec("token", 128)
DEFAULT_VALUE_GROUPS = GroupSpec("channel", 128)


def _arr(x):
    return np.asarray(x.array() if isinstance(x, Tensor) else x, dtype=np.float64)


def sensitivity(K, V, G_K, G_V, b: int, groups=(DEFAULT_KEY_GROUPS, DEFAULT_VALUE_GROUPS)) -> float:
    """Gradient-weighted L1 quantization error of one block at ``b`` bits."""
    K, V, G_K, G_V = _arr(K), _arr(V), _arr(G_K), _arr(G_V)
    if K.shape != G_K.shape or V.shape != G_V.shape:
        raise ValueError(f"gradient shapes {G_K.shape}/{G_V.shape} do not match "
                         f"tensors {K.shape}/{V.shape}")
    kg, vg = groups
    dk = K - fake_quant(K, b, kg)
    dv = V - fake_quant(V, b, vg)
    return float(np.abs(G_K * dk).sum() + np.abs(G_V * dv).sum())


def fd_gradient(f, X, h: float = 1e-4) -> np.ndarray:
    """Central differences; the step is ``h * max(1, |x|)`` per element."""
    X = _arr(X)
    grad = np.empty_like(X)
    flat = X.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        up = f(X)
        flat[i] = orig - step
        down = f(X)
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def taylor_check(loss, K, V, b: int, groups=(DEFAULT_KEY_GROUPS, DEFAULT_VALUE_GROUPS), h: float = 1e-4):
    """Predicted vs actual loss change from quantizing ``K`` and ``V``.

    ``loss(K, V)`` must return a finite scalar. The prediction uses
    finite-difference gradients at the full-precision point and the
    perturbation ``Q_b(x) - x``.
    """
    K, V = _arr(K), _arr(V)
    base = loss(K, V)
    kg, vg = groups
    Kq, Vq = fake_quant(K, b, kg), fake_quant(V, b, vg)
    moved = loss(Kq, Vq)
    if not (np.isfinite(base) and np.isfinite(moved)):
        raise NumericError("loss is not finite")
    gk = fd_gradient(lambda x: loss(x, V), K, h)
    gv = fd_gradient(lambda x: loss(K, x), V, h)
    predicted = float((gk * (Kq - K)).sum() + (gv * (Vq - V)).sum())
    return predicted, float(moved - base)


# ---------------------------------------------------------------------------
# Toy losses
# ---------------------------------------------------------------------------


def _softmax(S):
    S = S - S.max(axis=-1, keepdims=True)
    E = np.exp(S)
    return E / E.sum(axis=-1, keepdims=True)


def attention_loss(Q, K, V, T) -> float:
    d = Q.shape[-1]
    A = _softmax(Q @ K.T / np.sqrt(d))
    R = A @ V - T
    return 0.5 * float((R * R).sum())


def attention_loss_and_grads(Q, K, V, T):
    """Loss and analytic ``(dL/dQ, dL/dK, dL/dV)`` of the toy attention loss."""
    Q, K, V, T = (np.asarray(x, dtype=np.float64) for x in (Q, K, V, T))
    d = Q.shape[-1]
    A = _softmax(Q @ K.T / np.sqrt(d))
    R = A @ V - T
    loss = 0.5 * float((R * R).sum())
    dV = A.T @ R
    dA = R @ V.T
    dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
    dQ = dS @ K / np.sqrt(d)
    dK = dS.T @ Q / np.sqrt(d)
    return loss, dQ, dK, dV


def quadratic_loss(target_k, target_v, weight_k=1.0, weight_v=1.0):
    """``0.5 * w_k ||K - T_K||^2 + 0.5 * w_v ||V - T_V||^2`` as a callable."""
    tk, tv = np.asarray(target_k, np.float64), np.asarray(target_v, np.float64)

    def loss(K, V):
        return 0.5 * float(weight_k * ((K - tk) ** 2).sum() + weight_v * ((V - tv) ** 2).sum())

    return loss


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


@dataclass
class SensitivityTable:
    blocks: int
    options: list[int]
    s: list[list[float]]
    mem: list[list[int]]

    def __post_init__(self):
        self.options = [int(b) for b in self.options]
        if len(self.s) != self.blocks or len(self.mem) != self.blocks:
            raise ConfigError("s and mem need one row per block")
        for row_s, row_m in zip(self.s, self.mem):
            if len(row_s) != len(self.options) or len(row_m) != len(self.options):
                raise ConfigError("s and mem need one column per option")
            if any(v < 0 for v in row_s):
                raise ConfigError("sensitivities must be nonnegative")
            if any(int(m) <= 0 for m in row_m):
                raise ConfigError("memory costs must be positive")

    def to_dict(self):
        return {"blocks": self.blocks, "options": self.options,
                "s": [[float(v) for v in r] for r in self.s],
                "mem": [[int(m) for m in r] for r in self.mem]}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"blocks", "options", "s", "mem"}
        if unknown:
            raise ConfigError(f"unknown sensitivity table keys: {sorted(unknown)}")
        return cls(int(d["blocks"]), list(d["options"]), [list(map(float, r)) for r in d["s"]],
                   [list(map(int, r)) for r in d["mem"]])


def block_memory(config: CacheConfig, heads: int, head_dim: int, b: int) -> int:
    """Bytes a block's progressive cache needs with Fbit ``b``."""
    return Ledger(config.replace(fbit=b, budget_bytes=None), heads, head_dim).required_budget()


def profile_blocks(
    blocks: int,
    options=(2, 4),
    tokens: int = 256,
    heads: int = 1,
    head_dim: int = 32,
    queries: int = 16,
    samples: int = 1,
    seed: int = 0,
    config: CacheConfig | None = None,
) -> SensitivityTable:
    """Synthetic per-block profiling with the toy attention loss.

    Each block gets its own stream and a block-specific Key outlier channel
    strength, so sensitivities differ across blocks. ``samples`` independent
    calibration draws are averaged.
    """
    config = config or CacheConfig()
    rng = np.random.default_rng(seed)
    strengths = rng.uniform(1.0, 8.0, size=blocks)
    s = np.zeros((blocks, len(options)))
    groups = (config.key_groups, config.value_groups)
    for i in range(blocks):
        for j in range(samples):
            sub = int(rng.integers(2**31))
            K, V = synth_kv_arrays(sub, tokens, heads, head_dim, outlier_channels=[0],
                                   outlier_scale=float(strengths[i]))
            K, V = K.reshape(tokens, -1).astype(np.float64), V.reshape(tokens, -1).astype(np.float64)
            Q = synth_queries(sub, queries, heads, head_dim).reshape(queries, -1)
            T = np.random.default_rng(sub + 1).normal(size=(queries, K.shape[1]))
            _, _, gk, gv = attention_loss_and_grads(Q, K, V, T)
            for c, b in enumerate(options):
                s[i, c] += sensitivity(K, V, gk, gv, b, groups) / samples
    mem = [[block_memory(config, heads, head_dim, b) for b in options] for _ in range(blocks)]
    return SensitivityTable(blocks, list(options), s.tolist(), mem)


def load_block_table(entries, options, config: CacheConfig, heads: int, head_dim: int,
                     loader) -> SensitivityTable:
    """Table from externally profiled tensors.

    ``entries`` is a list of dicts with ``k``, ``v``, ``gk``, ``gv`` paths;
    ``loader`` maps a path to an array.
    """
    groups = (config.key_groups, config.value_groups)
    s = []
    for e in entries:
        K, V, gk, gv = (loader(e[name]) for name in ("k", "v", "gk", "gv"))
        K, V = K.reshape(K.shape[0], -1), V.reshape(V.shape[0], -1)
        gk, gv = gk.reshape(K.shape), gv.reshape(V.shape)
        s.append([sensitivity(K, V, gk, gv, b, groups) for b in options])
    mem = [[block_memory(config, heads, head_dim, b) for b in options] for _ in entries]
    return SensitivityTable(len(entries), list(options), s, mem)
