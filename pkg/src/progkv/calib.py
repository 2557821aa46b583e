"""RoPE, positional interpolation and channel-wise Key reparameterization.

The attention logits ``Q K^T`` are unchanged by ``(Q L)(K L^-1)^T`` for any
invertible diagonal ``L``. Picking ``L_i = max|K_i|^alpha`` flattens Key
outlier channels before quantization and moves their magnitude into the
(unquantized) queries. ``alpha`` is chosen by grid search on attention-output
reconstruction error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .quant import GroupSpec, fake_quant
from .sensitivity import _softmax

LAMBDA_FLOOR = 1e-5
GRID_POINTS = 20


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    scale: float = 1.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2:
            raise ConfigError(f"head_dim must be even and positive, got {self.head_dim}")
        if not self.base > 1:
            raise ConfigError(f"rope base must exceed 1, got {self.base}")
        if not self.scale > 0:
            raise ConfigError(f"position scale must be positive, got {self.scale}")

    def theta(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


def rope(K, positions, cfg: RopeConfig) -> np.ndarray:
    """Rotate channel pairs ``(i, i + d/2)`` of each row by ``scale * m * theta_i``."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[1] != cfg.head_dim:
        raise ValueError(f"expected tokens x {cfg.head_dim}, got {K.shape}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.size != K.shape[0]:
        raise ValueError(f"{pos.size} positions for {K.shape[0]} tokens")
    half = cfg.head_dim // 2
    ang = (cfg.scale * pos)[:, None] * cfg.theta()[None, :]
    c, s = np.cos(ang), np.sin(ang)
    a, b = K[:, :half], K[:, half:]
    return np.concatenate([a * c - b * s, a * s + b * c], axis=1)


def channel_period(i: int, cfg: RopeConfig) -> float:
    """Tokens per full turn of pair ``i``."""
    if not 0 <= i < cfg.head_dim // 2:
        raise ValueError(f"pair index {i} outside [0, {cfg.head_dim // 2})")
    return 2 * math.pi / (cfg.scale * cfg.base ** (-2.0 * i / cfg.head_dim))


def effective_length(tokens: int, cfg: RopeConfig) -> float:
    """Context length whose rotary phases ``tokens`` positions cover under interpolation."""
    return cfg.scale * tokens


@dataclass(frozen=True)
class ReparamFactors:
    lam: np.ndarray
    alpha: float

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=np.float64)
        if lam.ndim != 1 or not (lam > 0).all():
            raise ConfigError("reparameterization factors must be a positive vector")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "lam", lam)

    def to_dict(self):
        return {"alpha": float(self.alpha), "lambda": self.lam.tolist()}


def reparam_factors(K_calib, alpha: float) -> ReparamFactors:
    K = np.asarray(K_calib, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] == 0:
        raise ValueError("calibration Keys must be a nonempty tokens x channels matrix")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    peak = np.abs(K).max(axis=0)
    lam = np.maximum(peak ** alpha, LAMBDA_FLOOR)
    return ReparamFactors(lam, float(alpha))


@dataclass(frozen=True)
class Quantizer:
    """Key fake-quantizer; ``bits=None`` disables quantization."""

    bits: int | None = 2
    groups: GroupSpec = GroupSpec("channel", 128)

    def __call__(self, X):
        if self.bits is None:
            return np.asarray(X, dtype=np.float64)
        return fake_quant(X, self.bits, self.groups)


def reparam_apply(Q, K, f: ReparamFactors, quantizer: Quantizer):
    """``(P_reparam, P_ref)`` with ``P_reparam = (Q L) Q_b(K L^-1)^T``."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.shape[1] != K.shape[1] or f.lam.size != K.shape[1]:
        raise ValueError("Q, K and factors must share the channel dimension")
    ref = Q @ K.T
    P = (Q * f.lam) @ quantizer(K / f.lam).T
    return P, ref


def _attn(P, V, d):
    return _softmax(P / math.sqrt(d)) @ V


def alpha_grid(points: int = GRID_POINTS) -> np.ndarray:
    if points < 2:
        raise ValueError("grid needs at least two points")
    return np.linspace(0.0, 1.0, points)


def grid_search_alpha(Q, K, V, quantizer: Quantizer, grid: int = GRID_POINTS, K_calib=None):
    """Best ``alpha`` on an inclusive grid over ``[0, 1]`` and every grid loss.

    Loss is the Frobenius norm between ``softmax(P / sqrt(d)) V`` with and
    without quantization. Ties go to the lowest alpha.
    """
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    d = K.shape[1]
    calib = K if K_calib is None else K_calib
    alphas = alpha_grid(grid)
    target = _attn(Q @ K.T, V, d)
    losses = []
    for a in alphas:
        P, _ = reparam_apply(Q, K, reparam_factors(calib, float(a)), quantizer)
        losses.append(float(np.linalg.norm(_attn(P, V, d) - target)))
    best = int(np.argmin(losses))
    return float(alphas[best]), losses


def calibrate(Q, K, V, bits: int, cfg: RopeConfig, groups: GroupSpec | None = None,
              grid: int = GRID_POINTS, positions=None) -> dict:
    """Apply RoPE with interpolation to Q and K, then grid-search alpha.

    ``Q``, ``K``, ``V`` are ``tokens x head_dim``. Returns the JSON document
    ``{alpha, lambda, losses, tokens, effective_length, scale, bits}``.
    """
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    n = K.shape[0]
    pos = np.arange(n) if positions is None else np.asarray(positions)
    Qr, Kr = rope(Q, pos, cfg), rope(K, pos, cfg)
    quantizer = Quantizer(bits, groups or GroupSpec("channel", 128))
    alpha, losses = grid_search_alpha(Qr, Kr, V, quantizer, grid)
    f = reparam_factors(Kr, alpha)
    return {"alpha": alpha, "lambda": f.lam.tolist(), "losses": losses, "tokens": n,
            "effective_length": effective_length(n, cfg), "scale": cfg.scale, "bits": bits}
