"""Progressive mixed-precision KV cache for a single transformer block.

Token layout, oldest to newest::

    [ sink | closed chunks ... | open chunk | window ]

* ``sink``: the first ``keep_first`` tokens, held at 16 bits forever.
* ``window``: the most recent ``window`` tokens, held at 16 bits. Retained
  tokens are quantized one token at a time over channels, so their codes never
  change while they are retained.
* ``open chunk``: tokens that left the window but do not yet fill a chunk.
  They are staged at 16 bits (``fbit`` in immediate mode) with group-wise
  parameters recomputed as the chunk grows.
* ``closed chunks``: full chunks whose group parameters are frozen. They
  enter at the current tier through the shrink chain from their 16-bit codes,
  and every shrink epoch halves all of them at once.

A chunk is the least common multiple of the token-axis group sizes, so token
groups never straddle a chunk boundary. Memory is charged exactly: packed
codes plus two float32 parameters per group.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import CapacityError, ConfigError, EmptyStateError, NumericError
from .quant import (
    GroupLayout,
    GroupSpec,
    PackedTensor,
    dequantize_matrix,
    _quantize_rows,
    packed_len,
    quantize_matrix,
)
from .shrink import STRATEGIES, shrink_chain, shrink_step
from .tensorio import Tensor

MODES = ("progressive", "immediate")


def mem_bytes(tokens: int, heads: int, head_dim: int, b: int, g: GroupSpec | None = None) -> int:
    """Bytes to store a ``tokens x heads x head_dim`` tensor at ``b`` bits.

    With ``g=None`` the tensor is charged as raw ``b``-bit storage without
    any quantization parameters (an unquantized reference).
    """
    channels = heads * head_dim
    if g is None:
        return packed_len(tokens * channels, b)
    return GroupLayout(tokens, channels, g).nbytes(b)


def kv_cache_bytes(layers, batch, tokens, heads, head_dim, b, key_groups=None, value_groups=None):
    """Whole-model KV cache: layers x batch x (Key + Value)."""
    per = mem_bytes(tokens, heads, head_dim, b, key_groups) + mem_bytes(
        tokens, heads, head_dim, b, value_groups)
    return layers * batch * per


@dataclass
class CacheConfig:
    fbit: int = 2
    budget_bytes: int | None = None
    window: int = 128
    keep_first: int = 1
    key_groups: GroupSpec = field(default_factory=lambda: GroupSpec("token", 128))
    value_groups: GroupSpec = field(default_factory=lambda: GroupSpec("channel", 128))
    strategy: str = "equivalent"
    max_context: int = 32768

    def __post_init__(self):
        if isinstance(self.key_groups, dict):
            self.key_groups = GroupSpec.from_dict(self.key_groups)
        if isinstance(self.value_groups, dict):
            self.value_groups = GroupSpec.from_dict(self.value_groups)
        if self.fbit not in (2, 4, 8):
            raise ConfigError(f"fbit must be 2, 4 or 8, got {self.fbit}")
        if self.window < 0 or self.keep_first < 0:
            raise ConfigError("window and keep_first must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.budget_bytes is not None and self.budget_bytes <= 0:
            raise ConfigError("budget_bytes must be positive")
        if self.max_context < 1:
            raise ConfigError("max_context must be positive")

    @property
    def chunk(self) -> int:
        sizes = [g.group_size for g in (self.key_groups, self.value_groups) if g.axis == "token"]
        return math.lcm(*sizes) if sizes else 1

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["key_groups"] = self.key_groups.to_dict()
        d["value_groups"] = self.value_groups.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown cache config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return CacheConfig(**d)


def _retained_spec(g: GroupSpec) -> GroupSpec:
    return GroupSpec("channel", g.group_size)


def _quant_rows_fast(vals, w, spec):
    """Codes and dequantized values for rows that form whole groups.

    ``vals`` is either a prefix of one token-axis block or a stack of tokens
    under a channel-axis spec. Parameters come back in row-major group order.
    """
    r, C = vals.shape
    if spec.axis == "token":
        rows = vals.T
    elif C % spec.group_size == 0:
        rows = vals.reshape(-1, spec.group_size)
    else:
        codes, s, z = quantize_matrix(vals, w, spec)
        return codes, s, z, dequantize_matrix(codes, s, z, spec)
    codes, s, z = _quantize_rows(rows, w)
    deq = codes * s[:, None] + z[:, None]
    if spec.axis == "token":
        return codes.T, s, z, deq.T
    return codes.reshape(r, C), s, z, deq.reshape(r, C)


class Ledger:
    """Pure byte accounting for ``n`` appended tokens at a given tier."""

    def __init__(self, config: CacheConfig, heads: int, head_dim: int, mode: str = "progressive"):
        self.config = config
        self.channels = heads * head_dim
        self.mode = mode
        self.staging_width = 16 if mode == "progressive" else config.fbit
        C, kg, vg = self.channels, config.key_groups, config.value_groups
        self.retained_token = (GroupLayout(1, C, _retained_spec(kg)).nbytes(16)
                               + GroupLayout(1, C, _retained_spec(vg)).nbytes(16))
        chunk = config.chunk
        self.chunk_bytes = {
            b: GroupLayout(chunk, C, kg).nbytes(b) + GroupLayout(chunk, C, vg).nbytes(b)
            for b in (2, 4, 8, 16)
        }
        self.open_bytes = np.array([
            0 if k == 0 else GroupLayout(k, C, kg).nbytes(self.staging_width)
            + GroupLayout(k, C, vg).nbytes(self.staging_width)
            for k in range(chunk)
        ], dtype=np.int64)

    def split(self, n):
        """``(retained, closed_chunks, open_tokens)`` for ``n`` tokens."""
        cfg = self.config
        n = np.asarray(n, dtype=np.int64)
        sink = np.minimum(n, cfg.keep_first)
        rest = n - sink
        win = np.minimum(rest, cfg.window)
        body = rest - win
        return sink + win, body // cfg.chunk, body % cfg.chunk

    def bytes_at(self, n, tier: int):
        if isinstance(n, int):
            cfg = self.config
            sink = min(n, cfg.keep_first)
            win = min(n - sink, cfg.window)
            closed, open_ = divmod(n - sink - win, cfg.chunk)
            return ((sink + win) * self.retained_token + closed * self.chunk_bytes[tier]
                    + int(self.open_bytes[open_]))
        retained, closed, open_ = self.split(n)
        total = retained * self.retained_token + closed * self.chunk_bytes[tier] + self.open_bytes[open_]
        return int(total) if np.ndim(total) == 0 else total

    def required_budget(self, max_context: int | None = None) -> int:
        """Smallest budget that holds every prefix up to ``max_context`` at Fbit."""
        top = max_context or self.config.max_context
        n = np.arange(1, top + 1)
        return int(self.bytes_at(n, self.config.fbit).max())


def required_budget(config: CacheConfig, heads: int, head_dim: int, mode: str = "progressive") -> int:
    return Ledger(config, heads, head_dim, mode).required_budget()


@dataclass
class Segment:
    start: int
    end: int
    width: int
    key: PackedTensor
    value: PackedTensor
    widths: list = field(default_factory=list)

    @property
    def nbytes(self) -> int:
        return self.key.nbytes + self.value.nbytes


@dataclass
class _Retained:
    index: int
    codes_k: np.ndarray
    params_k: tuple
    codes_v: np.ndarray
    params_v: tuple
    deq_k: np.ndarray
    deq_v: np.ndarray
    nbytes: int


class KVBlockCache:
    """Progressive (or immediate, as a baseline) KV cache for one block.

    Exactly one controller may mutate an instance; ``read_all`` on a
    quiescent cache is safe from any thread.
    """

    def __init__(self, config: CacheConfig, heads: int, head_dim: int, mode: str = "progressive"):
        if mode not in MODES:
            raise ConfigError(f"unknown cache mode {mode!r}")
        self.config = config
        self.heads = heads
        self.head_dim = head_dim
        self.channels = heads * head_dim
        self.mode = mode
        self.ledger = Ledger(config, heads, head_dim, mode)
        self.budget = config.budget_bytes or self.ledger.required_budget()
        self.tier = 16 if mode == "progressive" else config.fbit
        self.staging_width = self.ledger.staging_width
        self.n = 0
        self.epochs: list[tuple[int, int, int]] = []

        self._sink: list[_Retained] = []
        self._window: deque[_Retained] = deque()
        self._closed: list[Segment] = []
        self._closed_bytes = 0

        chunk = config.chunk
        C = self.channels
        self._open_start = 0
        self._open_len = 0
        self._open_vals = (np.zeros((chunk, C)), np.zeros((chunk, C)))
        self._open_codes = (np.zeros((chunk, C), np.uint16), np.zeros((chunk, C), np.uint16))
        self._mirror_k = np.zeros((64, C))
        self._mirror_v = np.zeros((64, C))

    # -- storage helpers ---------------------------------------------------

    def _grow(self, need):
        cap = self._mirror_k.shape[0]
        if need <= cap:
            return
        cap = max(need, 2 * cap)
        for name in ("_mirror_k", "_mirror_v"):
            old = getattr(self, name)
            new = np.zeros((cap, self.channels))
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def _retain(self, index, k, v) -> _Retained:
        ck, sk, zk, dk = _quant_rows_fast(k[None, :], 16, _retained_spec(self.config.key_groups))
        cv, sv, zv, dv = _quant_rows_fast(v[None, :], 16, _retained_spec(self.config.value_groups))
        return _Retained(index, ck[0], (sk, zk), cv[0], (sv, zv), dk[0], dv[0],
                         self.ledger.retained_token)

    def _requant_open(self, pos):
        """Refresh the staged codes touched by the token at open position ``pos``."""
        w = self.staging_width
        for side, spec, mirror in ((0, self.config.key_groups, self._mirror_k),
                                   (1, self.config.value_groups, self._mirror_v)):
            lo = (pos // spec.group_size) * spec.group_size if spec.axis == "token" else pos
            codes, _, _, deq = _quant_rows_fast(self._open_vals[side][lo: pos + 1], w, spec)
            self._open_codes[side][lo: pos + 1] = codes
            mirror[self._open_start + lo: self._open_start + pos + 1] = deq

    def _close_open(self):
        chunk = self.config.chunk
        start = self._open_start
        packed = []
        for side, spec, mirror in ((0, self.config.key_groups, self._mirror_k),
                                   (1, self.config.value_groups, self._mirror_v)):
            vals = self._open_vals[side][:chunk]
            if self.mode == "progressive":
                c16, s16, z16 = quantize_matrix(vals, 16, spec)
                codes, s, z = shrink_chain(c16, s16, z16, self.tier, self.config.strategy)
            else:
                codes, s, z = quantize_matrix(vals, self.tier, spec)
            pt = PackedTensor.from_codes((chunk, self.channels), self.tier, spec, codes, s, z)
            mirror[start: start + chunk] = dequantize_matrix(codes, s, z, spec)
            packed.append(pt)
        seg = Segment(start, start + chunk, self.tier, packed[0], packed[1], [self.tier])
        self._closed.append(seg)
        self._closed_bytes += seg.nbytes
        self._open_start = start + chunk
        self._open_len = 0

    def _shrink_epoch(self):
        """Halve every closed segment at the current tier, oldest first."""
        target = self.tier // 2
        for seg in self._closed:
            if seg.width != self.tier:
                continue
            new = []
            for pt, mirror in ((seg.key, self._mirror_k), (seg.value, self._mirror_v)):
                codes, s, z = shrink_step(pt.code_matrix(), pt.scales, pt.zero_points,
                                          target, self.config.strategy)
                new_pt = PackedTensor.from_codes(pt.dims, target, pt.group_spec, codes, s, z)
                mirror[seg.start: seg.end] = dequantize_matrix(codes, s, z, pt.group_spec)
                new.append(new_pt)
            self._closed_bytes -= seg.nbytes
            seg.key, seg.value = new
            self._closed_bytes += seg.nbytes
            seg.width = target
            seg.widths.append(target)
        self.epochs.append((self.n, self.tier, target))
        self.tier = target

    # -- public API --------------------------------------------------------

    def append(self, k_step, v_step):
        """Add one token; shrinks older chunks when the budget would overflow."""
        k = np.asarray(k_step.array() if isinstance(k_step, Tensor) else k_step,
                       dtype=np.float64).reshape(-1)
        v = np.asarray(v_step.array() if isinstance(v_step, Tensor) else v_step,
                       dtype=np.float64).reshape(-1)
        if k.size != self.channels or v.size != self.channels:
            raise ValueError(
                f"step must hold {self.heads}x{self.head_dim} values, got {k.size}/{v.size}")
        if not (np.all(np.isfinite(k)) and np.all(np.isfinite(v))):
            raise NumericError("non-finite K/V step")

        n_new = self.n + 1
        target = self.tier
        while self.ledger.bytes_at(n_new, target) > self.budget:
            if self.mode != "progressive" or target <= self.config.fbit:
                raise CapacityError(
                    f"token {self.n} does not fit: {self.ledger.bytes_at(n_new, target)} bytes "
                    f"needed at {target}-bit, budget {self.budget}", step=self.n)
            target //= 2
        # Closed bytes only fall with the tier, so a tier found above is final.
        while self.tier > target:
            self._shrink_epoch()

        self._grow(n_new)
        idx = self.n
        cfg = self.config
        if idx < cfg.keep_first:
            r = self._retain(idx, k, v)
            self._sink.append(r)
            self._mirror_k[idx], self._mirror_v[idx] = r.deq_k, r.deq_v
            self._open_start = idx + 1
        else:
            if cfg.window > 0:
                r = self._retain(idx, k, v)
                self._window.append(r)
                self._mirror_k[idx], self._mirror_v[idx] = r.deq_k, r.deq_v
                leaving = self._window.popleft() if len(self._window) > cfg.window else None
                moved = None if leaving is None else (leaving.deq_k, leaving.deq_v)
            else:
                moved = (k, v)
            if moved is not None:
                pos = self._open_len
                self._open_vals[0][pos] = moved[0]
                self._open_vals[1][pos] = moved[1]
                self._open_len += 1
                if self._open_len == cfg.chunk:
                    self._close_open()
                else:
                    self._requant_open(pos)
        self.n = n_new
        used = self.bytes_used
        assert used == self.ledger.bytes_at(self.n, self.tier), "ledger drift"
        assert used <= self.budget, "budget exceeded"
        return self

    @property
    def bytes_used(self) -> int:
        retained = (len(self._sink) + len(self._window)) * self.ledger.retained_token
        open_ = 0
        if self._open_len:
            C, w = self.channels, self.staging_width
            open_ = (GroupLayout(self._open_len, C, self.config.key_groups).nbytes(w)
                     + GroupLayout(self._open_len, C, self.config.value_groups).nbytes(w))
        return retained + self._closed_bytes + open_

    def read_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Dequantized ``(tokens, channels)`` float64 views (do not mutate)."""
        if self.n == 0:
            raise EmptyStateError("cache is empty")
        return self._mirror_k[: self.n], self._mirror_v[: self.n]

    def read_all(self) -> tuple[Tensor, Tensor]:
        k, v = self.read_arrays()
        shape = (self.n, self.heads, self.head_dim)
        return (Tensor(shape, "float32", k.astype(np.float32)),
                Tensor(shape, "float32", v.astype(np.float32)))

    def segments(self) -> list[dict]:
        """Disjoint token ranges covering ``[0, n)`` with their widths."""
        out = []
        if self._sink:
            out.append({"kind": "sink", "start": 0, "end": len(self._sink), "width": 16})
        for s in self._closed:
            out.append({"kind": "quantized", "start": s.start, "end": s.end,
                        "width": s.width, "bytes": s.nbytes})
        if self._open_len:
            out.append({"kind": "open", "start": self._open_start,
                        "end": self._open_start + self._open_len, "width": self.staging_width})
        if self._window:
            out.append({"kind": "window", "start": self._window[0].index,
                        "end": self._window[-1].index + 1, "width": 16})
        return out

    def closed_segments(self) -> list[Segment]:
        return list(self._closed)

    def retained_indices(self) -> list[int]:
        return [r.index for r in self._sink] + [r.index for r in self._window]

    def retained_codes(self, index: int):
        """16-bit ``(key_codes, value_codes)`` of a retained token."""
        for r in list(self._sink) + list(self._window):
            if r.index == index:
                return r.codes_k, r.codes_v
        raise KeyError(f"token {index} is not retained")

    def width_map(self) -> dict[int, int]:
        """Token count per stored width."""
        counts: dict[int, int] = {}
        for seg in self.segments():
            counts[seg["width"]] = counts.get(seg["width"], 0) + seg["end"] - seg["start"]
        return dict(sorted(counts.items(), reverse=True))

    def dump_state(self) -> dict:
        retained, closed, open_ = self.ledger.split(self.n)
        return {
            "mode": self.mode,
            "config": self.config.to_dict(),
            "heads": self.heads,
            "head_dim": self.head_dim,
            "tokens": self.n,
            "tier": self.tier,
            "budget_bytes": self.budget,
            "bytes_used": self.bytes_used,
            "segments": self.segments(),
            "ledger": {
                "retained_tokens": int(retained),
                "retained_bytes": int(retained) * self.ledger.retained_token,
                "closed_chunks": int(closed),
                "closed_bytes": sum(s.nbytes for s in self._closed),
                "open_tokens": int(open_),
                "open_bytes": int(self.ledger.open_bytes[int(open_)]),
            },
            "epochs": [{"at_token": a, "from": f, "to": t} for a, f, t in self.epochs],
        }
