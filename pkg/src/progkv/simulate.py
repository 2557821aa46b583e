"""Decode-loop simulator comparing cache policies against full precision.

Each block owns an independent synthetic K/V stream and query stream. At every
step the new token is appended to each block's cache, one query attends over
the dequantized cache, and the output is compared with the same attention
over the raw stream.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cache import CacheConfig, KVBlockCache, mem_bytes, required_budget
from .errors import CapacityError, ConfigError, EmptyStateError
from .tensorio import read_csv, synth_kv_arrays, synth_queries, write_csv

POLICY_KINDS = ("fp_reference", "immediate", "progressive")
TRACE_SCHEMA = "decode-trace/1"
CSV_HEADER = ("step", "block", "bytes", "width_map", "mse", "max_abs", "cum_mse")


@dataclass
class StreamSpec:
    seed: int = 0
    steps: int = 4096
    heads: int = 1
    head_dim: int = 64
    blocks: int = 1
    outlier_channels: list[int] = field(default_factory=list)
    outlier_scale: float = 1.0

    def __post_init__(self):
        for name in ("steps", "heads", "head_dim", "blocks"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"stream {name} must be positive")

    def block_seed(self, block: int) -> int:
        return int(np.random.SeedSequence([self.seed, block]).generate_state(1)[0])

    def block_arrays(self, block: int):
        """``(K, V, Q)`` float64 arrays of shape ``(steps, heads, head_dim)``."""
        s = self.block_seed(block)
        K, V = synth_kv_arrays(s, self.steps, self.heads, self.head_dim,
                               self.outlier_channels, self.outlier_scale)
        Q = synth_queries(s, self.steps, self.heads, self.head_dim)
        return K.astype(np.float64), V.astype(np.float64), Q.astype(np.float64)

    def to_dict(self):
        return {"seed": self.seed, "steps": self.steps, "heads": self.heads,
                "head_dim": self.head_dim, "blocks": self.blocks,
                "outlier_channels": list(self.outlier_channels),
                "outlier_scale": self.outlier_scale}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown stream keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Policy:
    kind: str
    configs: list[CacheConfig] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigError(f"unknown policy {self.kind!r}")
        if self.kind != "fp_reference" and not self.configs:
            raise ConfigError(f"policy {self.kind!r} needs a cache config per block")

    def config_for(self, block: int) -> CacheConfig:
        return self.configs[block] if len(self.configs) > 1 else self.configs[0]


@dataclass
class DecodeTrace:
    policy: str
    steps: int
    blocks: int
    bytes: np.ndarray          # (blocks, steps) int
    mse: np.ndarray            # (blocks, steps)
    max_abs: np.ndarray        # (blocks, steps)
    width_maps: list[list[str]]
    budgets: list[int]
    epochs: list[list[tuple[int, int, int]]]

    @property
    def cum_mse(self) -> np.ndarray:
        return np.cumsum(self.mse, axis=1) / np.arange(1, self.steps + 1)

    def rows(self):
        cum = self.cum_mse
        for t in range(self.steps):
            for i in range(self.blocks):
                yield (t, i, int(self.bytes[i, t]), self.width_maps[i][t],
                       float(self.mse[i, t]), float(self.max_abs[i, t]), float(cum[i, t]))

    def summary(self) -> dict:
        return {
            "policy": self.policy,
            "steps": self.steps,
            "blocks": self.blocks,
            "mean_mse": float(self.mse.mean()) if self.steps else 0.0,
            "final_cum_mse": [float(c) for c in self.cum_mse[:, -1]] if self.steps else [],
            "max_bytes": [int(b) for b in self.bytes.max(axis=1)] if self.steps else [],
            "budgets": self.budgets,
            "epochs": [[{"at_token": a, "from": f, "to": t} for a, f, t in e] for e in self.epochs],
        }


def format_width_map(wm: dict[int, int]) -> str:
    return "|".join(f"{w}:{n}" for w, n in wm.items())


def _attend(K, V, q):
    """Per-head ``softmax(q K^T / sqrt(d)) V`` with max subtraction."""
    d = q.shape[-1]
    if K.shape[1] == 1:
        s = (K[:, 0] @ q[0])[None, :] / math.sqrt(d)
    else:
        s = np.matmul(K.transpose(1, 0, 2), q[:, :, None])[:, :, 0] / math.sqrt(d)
    s -= s.max(axis=1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=1, keepdims=True)
    if V.shape[1] == 1:
        return (a[0] @ V[:, 0])[None, :]
    return np.matmul(a[:, None, :], V.transpose(1, 0, 2))[:, 0, :]


def reference_outputs(K, V, Q) -> np.ndarray:
    steps = K.shape[0]
    return np.stack([_attend(K[: t + 1], V[: t + 1], Q[t]) for t in range(steps)])


def _apply_reparam(K, Q, lam):
    if lam is None:
        return K, Q
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape[-1] != K.shape[-1]:
        raise ConfigError(f"calibration has {lam.shape[-1]} channels, stream has {K.shape[-1]}")
    return K / lam, Q * lam


def _drive(cache, K, V, Q, ref, block=0):
    """Append every step to ``cache``; returns ``(bytes, mse, max_abs, width_maps)``."""
    steps, H, D = K.shape
    by = np.zeros(steps, dtype=np.int64)
    mse = np.zeros(steps)
    mx = np.zeros(steps)
    wm = []
    for t in range(steps):
        try:
            cache.append(K[t], V[t])
        except CapacityError as exc:
            err = CapacityError(f"block {block}, step {t}: {exc}", step=t)
            err.block = block
            raise err from exc
        kk, vv = cache.read_arrays()
        err = _attend(kk.reshape(t + 1, H, D), vv.reshape(t + 1, H, D), Q[t]) - ref[t]
        mse[t] = float(np.mean(err * err))
        mx[t] = float(np.abs(err).max())
        by[t] = cache.bytes_used
        wm.append(format_width_map(cache.width_map()))
    if by.max(initial=0) > cache.budget:
        raise AssertionError(f"block {block} exceeded its budget")
    return by, mse, mx, wm


def run(policy: Policy, stream: StreamSpec, steps: int | None = None, reparam=None,
        references=None) -> DecodeTrace:
    """Drive every block's cache through ``steps`` decode steps.

    ``reparam`` is an optional per-head-channel factor vector: caches see
    ``K / lam`` and queries become ``q * lam``, which leaves exact attention
    unchanged. ``references`` may hold precomputed full-precision outputs per
    block to share across policies.
    """
    steps = stream.steps if steps is None else steps
    if steps > stream.steps:
        raise ConfigError(f"stream has {stream.steps} steps, {steps} requested")
    B, H, D = stream.blocks, stream.heads, stream.head_dim
    by = np.zeros((B, steps), dtype=np.int64)
    mse = np.zeros((B, steps))
    mx = np.zeros((B, steps))
    wmaps: list[list[str]] = []
    budgets, epochs = [], []
    for i in range(B):
        K, V, Q = stream.block_arrays(i)
        K, V, Q = K[:steps], V[:steps], Q[:steps]
        ref = references[i][:steps] if references is not None else reference_outputs(K, V, Q)
        if policy.kind == "fp_reference":
            wm = []
            for t in range(steps):
                err = _attend(K[: t + 1], V[: t + 1], Q[t]) - ref[t]
                mse[i, t] = float(np.mean(err * err))
                mx[i, t] = float(np.abs(err).max())
                by[i, t] = 2 * mem_bytes(t + 1, H, D, 16)
                wm.append(f"16:{t + 1}")
            budgets.append(2 * mem_bytes(steps, H, D, 16))
            epochs.append([])
        else:
            cfg = policy.config_for(i)
            if cfg.budget_bytes is None:
                # both quantized policies get the budget progressive caching derives
                cfg = cfg.replace(budget_bytes=required_budget(cfg, H, D, "progressive"))
            cache = KVBlockCache(cfg, H, D, mode=policy.kind)
            Kc, Qc = _apply_reparam(K, Q, reparam)
            by[i], mse[i], mx[i], wm = _drive(cache, Kc, V, Qc, ref, i)
            budgets.append(int(cache.budget))
            epochs.append(list(cache.epochs))
        wmaps.append(wm)
    return DecodeTrace(policy.kind, steps, B, by, mse, mx, wmaps, budgets, epochs)


def run_policies(kinds, configs, stream: StreamSpec, steps=None, reparam=None) -> dict:
    """Run several policies on one stream, sharing the reference outputs."""
    steps = stream.steps if steps is None else steps
    refs = []
    for i in range(stream.blocks):
        K, V, Q = stream.block_arrays(i)
        refs.append(reference_outputs(K[:steps], V[:steps], Q[:steps]))
    return {k: run(Policy(k, configs), stream, steps, reparam if k != "fp_reference" else None,
                   refs) for k in kinds}


# ---------------------------------------------------------------------------
# Shrink strategy comparison
# ---------------------------------------------------------------------------


def _feed(cache, K, V):
    for t in range(K.shape[0]):
        cache.append(K[t], V[t])
    return cache


def compare_strategies(stream: StreamSpec, fbit: int, strategies=("equivalent", "direct", "modified"),
                       config: CacheConfig | None = None, block: int = 0) -> dict:
    """Same stream through progressive caches that differ only in strategy.

    Per strategy: final-state K/V reconstruction MSE, mean attention MSE over
    the run, and the fraction of codes in fbit-wide chunks that equal the
    codes of a cache quantizing straight to fbit (``code_match``; ``None``
    when no chunk reached fbit). Strategies are ranked by reconstruction MSE.
    """
    config = (config or CacheConfig()).replace(fbit=fbit)
    K, V, Q = stream.block_arrays(block)
    ref = reference_outputs(K, V, Q)
    H, D = stream.heads, stream.head_dim
    flatK, flatV = K.reshape(len(K), -1), V.reshape(len(V), -1)
    direct = _feed(KVBlockCache(config, H, D, "immediate"), K, V)
    direct_codes = {s.start: (s.key.code_matrix(), s.value.code_matrix())
                    for s in direct.closed_segments()}
    results = {}
    for name in strategies:
        cache = KVBlockCache(config.replace(strategy=name), H, D, "progressive")
        _, mse, _, _ = _drive(cache, K, V, Q, ref, block)
        kk, vv = cache.read_arrays()
        same = close = total = 0
        for seg in cache.closed_segments():
            if seg.width != fbit or seg.start not in direct_codes:
                continue
            for mine, theirs in zip((seg.key.code_matrix(), seg.value.code_matrix()),
                                    direct_codes[seg.start]):
                diff = np.abs(mine.astype(np.int64) - theirs.astype(np.int64))
                same += int((diff == 0).sum())
                close += int((diff <= 1).sum())
                total += diff.size
        results[name] = {
            "k_mse": float(np.mean((kk - flatK) ** 2)),
            "v_mse": float(np.mean((vv - flatV) ** 2)),
            "attn_mse": float(mse.mean()),
            "final_attn_mse": float(mse[-1]),
            "code_match": same / total if total else None,
            "code_within_one": close / total if total else None,
            "epochs": [list(e) for e in cache.epochs],
        }
    ranking = sorted(results, key=lambda n: results[n]["k_mse"] + results[n]["v_mse"])
    return {"fbit": fbit, "strategies": results, "ranking": ranking}


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def report(trace: DecodeTrace, fmt: str = "csv") -> str:
    """Serialize a trace; CSV has the fixed header ``CSV_HEADER``."""
    if trace.steps == 0 or trace.blocks == 0:
        raise EmptyStateError("cannot report an empty trace")
    if fmt == "csv":
        buf = io.StringIO()
        write_csv(trace.rows(), CSV_HEADER, buf)
        return buf.getvalue()
    if fmt == "json":
        doc = {"schema": TRACE_SCHEMA, "summary": trace.summary(),
               "columns": list(CSV_HEADER), "rows": [list(r) for r in trace.rows()]}
        return json.dumps(doc, indent=1) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")


def parse_report(text: str, fmt: str = "csv") -> list[dict]:
    """Rows of a report as dicts with typed values."""
    if fmt == "json":
        doc = json.loads(text)
        if doc.get("schema") != TRACE_SCHEMA:
            raise ConfigError(f"unsupported trace schema {doc.get('schema')!r}")
        return [dict(zip(doc["columns"], r)) for r in doc["rows"]]
    rows = read_csv(io.StringIO(text))
    cast = {"step": int, "block": int, "bytes": int, "width_map": str,
            "mse": float, "max_abs": float, "cum_mse": float}
    return [{k: cast[k](v) for k, v in r.items()} for r in rows]
