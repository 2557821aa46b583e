"""Asymmetric uniform group-wise quantization and sub-byte code packing.

A 2-D tensor ``(tokens, channels)`` is split into groups along one axis:

* ``token`` axis: each group is ``group_size`` consecutive tokens of a single
  channel (per-channel quantization, the Key default).
* ``channel`` axis: each group is ``group_size`` consecutive channels of a
  single token (per-token quantization, the Value default).

Groups are enumerated block-major: block ``j`` along the grouped axis, then
position ``o`` along the other axis, giving group id ``j * O + o``. A trailing
partial block is allowed and uses only its own min/max.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .tensorio import Tensor, read_tensor, write_tensor

BIT_WIDTHS = (2, 4, 8, 16)
PARAM_BYTES = 8  # scale + zero point, float32 each


def check_bit_width(b: int) -> int:
    if b not in BIT_WIDTHS:
        raise ValueError(f"bit width must be one of {BIT_WIDTHS}, got {b}")
    return int(b)


def qmax(b: int) -> int:
    return (1 << b) - 1


def round_half_away(v):
    """Round to nearest integer, ties away from zero."""
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: float

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError(f"scale must be nonnegative, got {self.scale}")


@dataclass(frozen=True)
class GroupSpec:
    axis: str = "token"
    group_size: int = 128

    def __post_init__(self):
        if self.axis not in ("token", "channel"):
            raise ValueError(f"group axis must be 'token' or 'channel', got {self.axis!r}")
        if int(self.group_size) < 1:
            raise ValueError("group_size must be positive")

    def to_dict(self):
        return {"axis": self.axis, "group_size": self.group_size}

    @classmethod
    def from_dict(cls, d):
        return cls(axis=d.get("axis", "token"), group_size=int(d.get("group_size", 128)))


# ---------------------------------------------------------------------------
# Single group
# ---------------------------------------------------------------------------


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise NumericError("quantization input contains NaN or Inf")


def _quantize_rows(rows: np.ndarray, b: int):
    """Quantize each row of ``rows`` as one group."""
    rows = np.asarray(rows, dtype=np.float64)
    zero = rows.min(axis=1)
    top = rows.max(axis=1)
    scale = (top - zero) / qmax(b)
    safe = np.where(scale > 0, scale, 1.0)
    codes = np.floor((rows - zero[:, None]) / safe[:, None] + 0.5)
    codes = np.clip(codes, 0, qmax(b))
    codes[scale == 0] = 0
    return codes.astype(np.uint16), scale, zero


def quantize_group(x, b: int) -> tuple[np.ndarray, QuantParams]:
    check_bit_width(b)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot quantize an empty group")
    _check_finite(x)
    codes, scale, zero = _quantize_rows(x[None, :], b)
    return codes[0], QuantParams(float(scale[0]), float(zero[0]))


def quantize_with_params(x, b: int, p: QuantParams) -> np.ndarray:
    """Codes for ``x`` on a given grid, clipped to ``[0, 2^b - 1]``."""
    check_bit_width(b)
    x = np.asarray(x, dtype=np.float64)
    if p.scale == 0:
        return np.zeros(x.shape, dtype=np.uint16)
    codes = round_half_away((x - p.zero_point) / p.scale)
    return np.clip(codes, 0, qmax(b)).astype(np.uint16)


def dequantize_group(codes, p: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > qmax(16)):
        raise ValueError("code outside the 16-bit range")
    return codes.astype(np.float64) * p.scale + p.zero_point


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------


def _check_codes(codes: np.ndarray, b: int):
    if codes.size == 0:
        return
    if not np.issubdtype(codes.dtype, np.integer):
        if not np.all(codes == np.floor(codes)):
            raise ValueError("codes must be integers")
    if codes.min() < 0 or codes.max() > qmax(b):
        raise ValueError(f"code outside [0, {qmax(b)}] for {b}-bit packing")


def pack_rows(codes: np.ndarray, b: int) -> np.ndarray:
    """Pack each row independently, padding every row to a byte boundary."""
    codes = np.asarray(codes)
    rows, length = codes.shape
    if b == 16:
        return codes.astype("<u2").view(np.uint8).reshape(rows, 2 * length)
    if b == 8:
        return codes.astype(np.uint8)
    per = 8 // b
    pad = (-length) % per
    c = np.pad(codes.astype(np.uint8), ((0, 0), (0, pad))).reshape(rows, -1, per)
    shifts = (np.arange(per) * b).astype(np.uint8)
    return np.bitwise_or.reduce(c << shifts, axis=-1).astype(np.uint8)


def unpack_rows(packed: np.ndarray, length: int, b: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    rows = packed.shape[0]
    if b == 16:
        return packed.reshape(rows, -1).view("<u2")[:, :length].astype(np.uint16)
    if b == 8:
        return packed[:, :length].astype(np.uint16)
    per = 8 // b
    shifts = (np.arange(per) * b).astype(np.uint8)
    c = (packed[:, :, None] >> shifts) & qmax(b)
    return c.reshape(rows, -1)[:, :length].astype(np.uint16)


def packed_len(count: int, b: int) -> int:
    return (count * b + 7) // 8


def pack(codes, b: int) -> bytes:
    check_bit_width(b)
    codes = np.asarray(codes).reshape(-1)
    _check_codes(codes, b)
    return pack_rows(codes.astype(np.int64)[None, :], b).tobytes()


def unpack(buf: bytes, count: int, b: int) -> np.ndarray:
    check_bit_width(b)
    need = packed_len(count, b)
    if len(buf) < need:
        raise ValueError(f"need {need} bytes for {count} {b}-bit codes, got {len(buf)}")
    arr = np.frombuffer(bytes(buf[:need]), dtype=np.uint8)[None, :]
    return unpack_rows(arr, count, b)[0]


# ---------------------------------------------------------------------------
# Group layout over a 2-D matrix
# ---------------------------------------------------------------------------


def as_matrix(arr) -> np.ndarray:
    """View any tensor as ``(tokens, product of remaining dims)``."""
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    return arr.reshape(arr.shape[0], -1)


@dataclass(frozen=True)
class GroupLayout:
    """Where the groups of a ``(tokens, channels)`` matrix live."""

    tokens: int
    channels: int
    spec: GroupSpec

    @property
    def along(self) -> int:
        return self.tokens if self.spec.axis == "token" else self.channels

    @property
    def other(self) -> int:
        return self.channels if self.spec.axis == "token" else self.tokens

    @property
    def n_full(self) -> int:
        return self.along // self.spec.group_size

    @property
    def tail(self) -> int:
        return self.along % self.spec.group_size

    @property
    def n_groups(self) -> int:
        return (self.n_full + (1 if self.tail else 0)) * self.other

    def group_lengths(self) -> np.ndarray:
        lens = [self.spec.group_size] * (self.n_full * self.other)
        lens += [self.tail] * (self.other if self.tail else 0)
        return np.asarray(lens, dtype=np.int64)

    def code_bytes(self, b: int) -> int:
        full = self.n_full * self.other * packed_len(self.spec.group_size, b)
        part = self.other * packed_len(self.tail, b) if self.tail else 0
        return full + part

    def nbytes(self, b: int) -> int:
        return self.code_bytes(b) + PARAM_BYTES * self.n_groups

    def group_ids(self) -> np.ndarray:
        """``(tokens, channels)`` map from element to group id."""
        t = np.arange(self.tokens)[:, None]
        c = np.arange(self.channels)[None, :]
        if self.spec.axis == "token":
            return (t // self.spec.group_size) * self.channels + c
        return (c // self.spec.group_size) * self.tokens + t

    # grouped view helpers: M is (other, along)
    def _oriented(self, X):
        return X.T if self.spec.axis == "token" else X

    def split(self, X):
        """Return ``(full_rows, tail_rows)`` in group order."""
        M = self._oriented(X)
        g, nf, o = self.spec.group_size, self.n_full, self.other
        full = M[:, : nf * g].reshape(o, nf, g).transpose(1, 0, 2).reshape(nf * o, g)
        tail = M[:, nf * g:]
        return full, tail

    def merge(self, full_rows, tail_rows):
        g, nf, o = self.spec.group_size, self.n_full, self.other
        M = np.empty((o, self.along), dtype=full_rows.dtype)
        M[:, : nf * g] = full_rows.reshape(nf, o, g).transpose(1, 0, 2).reshape(o, nf * g)
        if self.tail:
            M[:, nf * g:] = tail_rows
        return M.T if self.spec.axis == "token" else M


def quantize_matrix(X, b: int, spec: GroupSpec):
    """Quantize a 2-D array group-wise.

    Returns ``(codes, scales, zeros)`` with ``codes`` shaped like ``X``
    (uint16) and the parameters in group order.
    """
    X = np.asarray(X, dtype=np.float64)
    layout = GroupLayout(X.shape[0], X.shape[1], spec)
    full, tail = layout.split(X)
    cf, sf, zf = _quantize_rows(full, b) if full.size else (
        np.zeros((0, spec.group_size), np.uint16), np.zeros(0), np.zeros(0))
    if layout.tail:
        ct, st, zt = _quantize_rows(tail, b)
    else:
        ct, st, zt = np.zeros((layout.other, 0), np.uint16), np.zeros(0), np.zeros(0)
    codes = layout.merge(cf, ct)
    return codes, np.concatenate([sf, st]), np.concatenate([zf, zt])


def dequantize_matrix(codes, scales, zeros, spec: GroupSpec) -> np.ndarray:
    codes = np.asarray(codes)
    layout = GroupLayout(codes.shape[0], codes.shape[1], spec)
    ids = layout.group_ids()
    return codes.astype(np.float64) * scales[ids] + zeros[ids]


def pack_matrix(codes, b: int, spec: GroupSpec) -> bytes:
    layout = GroupLayout(codes.shape[0], codes.shape[1], spec)
    full, tail = layout.split(np.asarray(codes))
    out = pack_rows(full, b).tobytes() if full.size else b""
    if layout.tail:
        out += pack_rows(tail, b).tobytes()
    return out


def unpack_matrix(buf: bytes, tokens: int, channels: int, b: int, spec: GroupSpec) -> np.ndarray:
    layout = GroupLayout(tokens, channels, spec)
    g = spec.group_size
    nf, o = layout.n_full, layout.other
    arr = np.frombuffer(buf, dtype=np.uint8)
    split = nf * o * packed_len(g, b)
    full = unpack_rows(arr[:split].reshape(nf * o, -1), g, b) if nf else np.zeros((0, g), np.uint16)
    tail = np.zeros((o, 0), np.uint16)
    if layout.tail:
        tail = unpack_rows(arr[split:].reshape(o, -1), layout.tail, b)
    return layout.merge(full, tail)


# ---------------------------------------------------------------------------
# PackedTensor
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PackedTensor:
    dims: tuple
    bit_width: int
    group_spec: GroupSpec
    scales: np.ndarray
    zero_points: np.ndarray
    codes: bytes = field(repr=False)

    def __post_init__(self):
        check_bit_width(self.bit_width)
        layout = self.layout
        if len(self.scales) != layout.n_groups or len(self.zero_points) != layout.n_groups:
            raise ValueError(
                f"expected {layout.n_groups} parameter pairs, got "
                f"{len(self.scales)}/{len(self.zero_points)}"
            )
        if len(self.codes) != layout.code_bytes(self.bit_width):
            raise ValueError(
                f"packed length {len(self.codes)} != {layout.code_bytes(self.bit_width)}"
            )
        if np.any(np.asarray(self.scales) < 0):
            raise ValueError("negative scale")
        object.__setattr__(self, "_nbytes", len(self.codes) + PARAM_BYTES * layout.n_groups)

    @property
    def layout(self) -> GroupLayout:
        tokens = self.dims[0]
        return GroupLayout(tokens, math.prod(self.dims[1:]), self.group_spec)

    @property
    def n_groups(self) -> int:
        return self.layout.n_groups

    @property
    def nbytes(self) -> int:
        """Stored size: packed codes plus two float32 parameters per group."""
        return self._nbytes

    def code_matrix(self) -> np.ndarray:
        lay = self.layout
        return unpack_matrix(self.codes, lay.tokens, lay.channels, self.bit_width, self.group_spec)

    @classmethod
    def from_codes(cls, dims, b, spec, codes2d, scales, zeros) -> "PackedTensor":
        codes2d = np.asarray(codes2d)
        _check_codes(codes2d, b)
        return cls(tuple(dims), b, spec, np.asarray(scales, np.float64),
                   np.asarray(zeros, np.float64), pack_matrix(codes2d, b, spec))


def quantize_tensor(t, b: int, g: GroupSpec = GroupSpec()) -> PackedTensor:
    check_bit_width(b)
    arr = t.array() if isinstance(t, Tensor) else np.asarray(t)
    if arr.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    _check_finite(arr)
    dims = arr.shape if arr.ndim else (1,)
    codes, scales, zeros = quantize_matrix(as_matrix(arr), b, g)
    return PackedTensor.from_codes(dims, b, g, codes, scales, zeros)


def dequantize_tensor(pt: PackedTensor) -> Tensor:
    codes = pt.code_matrix()
    vals = dequantize_matrix(codes, pt.scales, pt.zero_points, pt.group_spec)
    return Tensor(pt.dims, "float32", vals.astype(np.float32).reshape(-1))


def fake_quant(x, b: int, g: GroupSpec) -> np.ndarray:
    """Quantize-dequantize round trip in float64, same shape as ``x``."""
    x = np.asarray(x, dtype=np.float64)
    codes, s, z = quantize_matrix(as_matrix(x), b, g)
    return dequantize_matrix(codes, s, z, g).reshape(x.shape)


# ---------------------------------------------------------------------------
# Serialization: three tensor files plus a JSON sidecar
# ---------------------------------------------------------------------------


def save_packed(pt: PackedTensor, prefix: str) -> dict:
    """Write ``prefix.codes/.scales/.zeros.pmkt`` and ``prefix.json``.

    The codes file holds the packed byte stream reinterpreted as int32 words
    (zero padded to a multiple of four); ``code_bytes`` in the sidecar gives
    the true length. Parameters are stored as float32.
    """
    raw = pt.codes + b"\x00" * ((-len(pt.codes)) % 4)
    words = np.frombuffer(raw, dtype="<i4")
    files = {
        "codes": f"{prefix}.codes.pmkt",
        "scales": f"{prefix}.scales.pmkt",
        "zeros": f"{prefix}.zeros.pmkt",
    }
    with open(files["codes"], "wb") as fh:
        write_tensor(Tensor((len(words),), "int32", words), fh)
    with open(files["scales"], "wb") as fh:
        write_tensor(Tensor((pt.n_groups,), "float32", pt.scales), fh)
    with open(files["zeros"], "wb") as fh:
        write_tensor(Tensor((pt.n_groups,), "float32", pt.zero_points), fh)
    meta = {
        "dims": list(pt.dims),
        "bit_width": pt.bit_width,
        "group_spec": pt.group_spec.to_dict(),
        "code_bytes": len(pt.codes),
        "files": files,
    }
    with open(f"{prefix}.json", "w") as fh:
        json.dump(meta, fh, indent=2)
    return meta


def load_packed(prefix: str) -> PackedTensor:
    with open(f"{prefix}.json") as fh:
        meta = json.load(fh)
    with open(meta["files"]["codes"], "rb") as fh:
        words = read_tensor(fh).data
    with open(meta["files"]["scales"], "rb") as fh:
        scales = read_tensor(fh).data.astype(np.float64)
    with open(meta["files"]["zeros"], "rb") as fh:
        zeros = read_tensor(fh).data.astype(np.float64)
    codes = words.astype("<i4").tobytes()[: meta["code_bytes"]]
    return PackedTensor(tuple(meta["dims"]), int(meta["bit_width"]),
                        GroupSpec.from_dict(meta["group_spec"]), scales, zeros, codes)
