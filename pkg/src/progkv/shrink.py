"""Bit-width shrinking 2b -> b on integer codes.

Three strategies, all operating on codes in place of dequantize/requantize:

``equivalent``
    ``((2^2b - 2^b + 1) * (x + 2^(b-1))) >> 3b``, scale ``(2^b + 1) * S``,
    zero point unchanged. Bit-exact with rounding ``x / (2^b + 1)``, which is
    what dequantizing at 2b bits and requantizing at b bits over the same
    range produces.
``direct``
    ``x >> b`` with the same parameter update as ``equivalent``.
``modified``
    ``x >> b`` with scale ``2^b * S`` and zero point ``Z + (S_b - S) / 2``,
    so each b-bit level sits at the mean of the 2b-bit levels it absorbs.
"""

from __future__ import annotations

import numpy as np

from .quant import QuantParams

STRATEGIES = ("equivalent", "direct", "modified")
CHAIN = (16, 8, 4, 2)


def _check(b):
    if b not in (2, 4, 8):
        raise ValueError(f"half-target width must be 2, 4 or 8, got {b}")


def _codes(x, b):
    arr = np.asarray(x)
    if arr.size and (arr.min() < 0 or arr.max() > (1 << (2 * b)) - 1):
        raise ValueError(f"code outside [0, 2^{2 * b} - 1]")
    return arr.astype(np.uint64)


def _out(codes, like):
    if np.ndim(like) == 0:
        return int(codes)
    return codes.astype(np.uint16)


def shrink_params(strategy: str, b: int, scale, zero):
    """Parameter update for a 2b -> b step; works on floats or arrays."""
    if strategy in ("equivalent", "direct"):
        return scale * ((1 << b) + 1), zero
    if strategy == "modified":
        new_scale = scale * (1 << b)
        return new_scale, zero + 0.5 * (new_scale - scale)
    raise ValueError(f"unknown shrink strategy {strategy!r}")


def equivalent_codes(x, b: int):
    _check(b)
    xs = _codes(x, b)
    mult = np.uint64((1 << (2 * b)) - (1 << b) + 1)
    res = (mult * (xs + np.uint64(1 << (b - 1)))) >> np.uint64(3 * b)
    return _out(res, x)


def shift_codes(x, b: int):
    _check(b)
    return _out(_codes(x, b) >> np.uint64(b), x)


def shrink_equivalent(x, b: int, p: QuantParams):
    s, z = shrink_params("equivalent", b, p.scale, p.zero_point)
    return equivalent_codes(x, b), QuantParams(s, z)


def shrink_direct(x, b: int, p: QuantParams):
    s, z = shrink_params("direct", b, p.scale, p.zero_point)
    return shift_codes(x, b), QuantParams(s, z)


def shrink_modified(x, b: int, p: QuantParams):
    s, z = shrink_params("modified", b, p.scale, p.zero_point)
    return shift_codes(x, b), QuantParams(s, z)


_CODE_FN = {"equivalent": equivalent_codes, "direct": shift_codes, "modified": shift_codes}


def shrink_step(codes, scales, zeros, b: int, strategy: str = "equivalent"):
    """Array form of one 2b -> b step: returns ``(codes, scales, zeros)``."""
    if strategy not in _CODE_FN:
        raise ValueError(f"unknown shrink strategy {strategy!r}")
    new_codes = _CODE_FN[strategy](np.asarray(codes), b)
    new_s, new_z = shrink_params(strategy, b, np.asarray(scales, np.float64),
                                 np.asarray(zeros, np.float64))
    return np.asarray(new_codes, dtype=np.uint16), new_s, new_z


def shrink_chain(codes, scales, zeros, target: int, strategy: str = "equivalent",
                 source: int = 16):
    """Halve repeatedly from ``source`` down to ``target`` bits.

    ``scales``/``zeros`` may be scalars (a single :class:`QuantParams`-like
    group) or per-group arrays already broadcast by the caller.
    """
    if target not in CHAIN or source not in CHAIN or target > source:
        raise ValueError(f"cannot shrink {source} -> {target} bits")
    codes = np.asarray(codes)
    width = source
    while width > target:
        width //= 2
        codes, scales, zeros = shrink_step(codes, scales, zeros, width, strategy)
    return codes, scales, zeros


def shrink_chain_params(codes16, p16: QuantParams, target: int, strategy: str = "equivalent"):
    """Chain on one group; returns ``(codes, QuantParams)``."""
    codes, s, z = shrink_chain(codes16, p16.scale, p16.zero_point, target, strategy)
    return codes, QuantParams(float(s), float(z))


def mapping_table(b: int, strategy: str):
    """All ``(source_code, target_code)`` pairs for one 2b -> b step."""
    src = np.arange(1 << (2 * b), dtype=np.int64)
    return src, np.asarray(_CODE_FN[strategy](src, b), dtype=np.int64)
