"""Binary tensor container, synthetic K/V streams and report writers.

File layout (all little-endian)::

    magic   4 bytes   b"PMKT"
    version uint32    currently 1
    dtype   uint8     1 = float32, 2 = int32
    ndim    uint8
    dims    uint64 x ndim
    payload product(dims) * 4 bytes, row-major
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import TensorFormatError, TensorLengthError

MAGIC = b"PMKT"
VERSION = 1
DTYPE_CODES = {"float32": 1, "int32": 2}
_CODE_TO_DTYPE = {v: k for k, v in DTYPE_CODES.items()}
_NP_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}
_U64_MAX = 2**64 - 1


@dataclass(eq=False)
class Tensor:
    """Flat row-major buffer plus shape and dtype tag."""

    dims: tuple[int, ...]
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 1:
            raise ValueError("a tensor needs at least one dimension")
        if any(d < 0 for d in self.dims):
            raise ValueError(f"negative dimension in {self.dims}")
        if self.dtype not in _NP_DTYPES:
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        self.data = np.ascontiguousarray(self.data, dtype=_NP_DTYPES[self.dtype]).reshape(-1)
        if self.data.size != math.prod(self.dims):
            raise ValueError(
                f"element count {self.data.size} does not match dims {self.dims}"
            )

    @classmethod
    def from_array(cls, arr, dtype: str | None = None) -> "Tensor":
        arr = np.asarray(arr)
        if dtype is None:
            dtype = "int32" if np.issubdtype(arr.dtype, np.integer) else "float32"
        dims = arr.shape if arr.ndim else (1,)
        return cls(dims, dtype, arr.reshape(-1))

    def array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )


def write_tensor(t: Tensor, sink: BinaryIO) -> int:
    """Serialize ``t`` to ``sink``; returns the number of bytes written."""
    if len(t.dims) > 255:
        raise ValueError("at most 255 dimensions fit the header")
    if any(d > _U64_MAX for d in t.dims):
        raise OverflowError("dimension does not fit in 64 bits")
    header = MAGIC + struct.pack("<IBB", VERSION, DTYPE_CODES[t.dtype], len(t.dims))
    header += struct.pack(f"<{len(t.dims)}Q", *t.dims)
    payload = t.data.astype(_NP_DTYPES[t.dtype], copy=False).tobytes()
    sink.write(header)
    sink.write(payload)
    return len(header) + len(payload)


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise TensorLengthError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(source: BinaryIO) -> Tensor:
    magic = source.read(4)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    version, code, ndim = struct.unpack("<IBB", _read_exact(source, 6, "header"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFormatError(f"unknown dtype code {code}")
    dtype = _CODE_TO_DTYPE[code]
    dims = struct.unpack(f"<{ndim}Q", _read_exact(source, 8 * ndim, "dims"))
    if ndim < 1:
        raise TensorFormatError("zero-dimensional tensor in file")
    count = math.prod(dims)
    width = _NP_DTYPES[dtype].itemsize
    payload = _read_exact(source, count * width, "payload")
    data = np.frombuffer(payload, dtype=_NP_DTYPES[dtype]).copy()
    return Tensor(dims, dtype, data)


def save_tensor(t: Tensor, path) -> int:
    with open(path, "wb") as fh:
        return write_tensor(t, fh)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(t: Tensor) -> bytes:
    buf = io.BytesIO()
    write_tensor(t, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Synthetic K/V workload
# ---------------------------------------------------------------------------

DRIFT_PERIOD = 1024


def _channel_stream(rng: np.random.Generator, steps, heads, head_dim):
    shape = (heads, head_dim)
    base = rng.uniform(0.75, 1.25, size=shape)
    mean = rng.normal(0.0, 0.5, size=shape)
    amp = 0.5 * base
    phase = rng.uniform(0.0, 2 * np.pi, size=shape)
    t = np.arange(steps, dtype=np.float64)[:, None, None]
    drift = amp * np.sin(2 * np.pi * t / DRIFT_PERIOD + phase)
    noise = rng.standard_normal((steps, heads, head_dim)) * base
    return mean + drift + noise


def synth_kv_arrays(
    seed: int,
    steps: int,
    heads: int,
    head_dim: int,
    outlier_channels: Iterable[int] = (),
    outlier_scale: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``(steps, heads, head_dim)`` float32 Key and Value arrays.

    Key and Value draw from independent child seeds, so a stream's prefix does
    not depend on ``steps``. Outlier channels (indices within a head) are
    scaled on the Key side only.
    """
    if head_dim % 2:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    if outlier_scale <= 0:
        raise ValueError("outlier_scale must be positive")
    k_seq, v_seq = np.random.SeedSequence(seed).spawn(2)
    k = _channel_stream(np.random.default_rng(k_seq), steps, heads, head_dim)
    v = _channel_stream(np.random.default_rng(v_seq), steps, heads, head_dim)
    chans = sorted(set(int(c) for c in outlier_channels))
    for c in chans:
        if not 0 <= c < head_dim:
            raise ValueError(f"outlier channel {c} outside [0, {head_dim})")
    if chans:
        k[:, :, chans] *= outlier_scale
    return k.astype(np.float32), v.astype(np.float32)


def synth_kv_stream(
    seed: int,
    steps: int,
    heads: int,
    head_dim: int,
    outlier_channels: Iterable[int] = (),
    outlier_scale: float = 1.0,
) -> list[tuple[Tensor, Tensor]]:
    """Per-step ``(K, V)`` tensors of shape ``heads x head_dim``."""
    k, v = synth_kv_arrays(seed, steps, heads, head_dim, outlier_channels, outlier_scale)
    return [(Tensor.from_array(k[i]), Tensor.from_array(v[i])) for i in range(steps)]


def synth_queries(seed: int, steps: int, heads: int, head_dim: int) -> np.ndarray:
    """Query vectors from the Key generator on a separate seed stream."""
    q_seq = np.random.SeedSequence([seed, 0x51])
    rng = np.random.default_rng(q_seq)
    return _channel_stream(rng, steps, heads, head_dim).astype(np.float32)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_csv(rows: Iterable[Sequence], header: Sequence[str], sink) -> None:
    """One record per row, header first. ``sink`` is a path or text stream."""
    if isinstance(sink, (str, bytes)) or hasattr(sink, "__fspath__"):
        with open(sink, "w", newline="") as fh:
            write_csv(rows, header, fh)
        return
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])


def read_csv(source) -> list[dict]:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="") as fh:
            return read_csv(fh)
    return list(csv.DictReader(source))


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=_json_default)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_json(obj))
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
