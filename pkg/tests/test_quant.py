import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progkv.errors import NumericError
from progkv.quant import (
    GroupSpec,
    PackedTensor,
    QuantParams,
    dequantize_group,
    dequantize_tensor,
    fake_quant,
    load_packed,
    pack,
    packed_len,
    quantize_group,
    quantize_tensor,
    round_half_away,
    save_packed,
    unpack,
)
from progkv.tensorio import Tensor


def naive_quant(x, b):
    """Scalar reference implementation of min/max asymmetric quantization."""
    lo, hi = min(x), max(x)
    if hi == lo:
        return [0] * len(x), 0.0, lo
    s = (hi - lo) / (2**b - 1)
    codes = []
    for v in x:
        r = (v - lo) / s
        codes.append(min(2**b - 1, int(np.floor(r + 0.5))))
    return codes, s, lo


def test_exactly_representable():
    codes, p = quantize_group([0, 1, 2, 3], 2)
    assert codes.tolist() == [0, 1, 2, 3]
    assert (p.scale, p.zero_point) == (1.0, 0.0)


def test_constant_group():
    codes, p = quantize_group([5, 5, 5], 4)
    assert codes.tolist() == [0, 0, 0]
    assert p.scale == 0 and p.zero_point == 5
    assert dequantize_group(codes, p).tolist() == [5, 5, 5]


def test_dequantize_examples():
    assert dequantize_group([0, 3], QuantParams(1, 0)).tolist() == [0, 3]
    assert dequantize_group([7], QuantParams(0, 5)).tolist() == [5]


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        quantize_group([0.0, np.nan], 4)
    with pytest.raises(NumericError):
        quantize_tensor(Tensor((2, 1), "float32", [0, np.inf]), 4)


def test_round_half_away():
    assert round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49]).tolist() == [1, 2, 3, -1, -2, 0]


@pytest.mark.parametrize("b", [2, 4, 8, 16])
def test_matches_naive_reference(b):
    rng = np.random.default_rng(b)
    for _ in range(50):
        x = rng.normal(size=int(rng.integers(1, 40))).tolist()
        codes, p = quantize_group(x, b)
        ref, s, z = naive_quant(x, b)
        assert codes.tolist() == ref
        assert p.scale == pytest.approx(s, rel=1e-15) and p.zero_point == z


@pytest.mark.parametrize("b", [2, 4, 8, 16])
def test_round_trip_bound(b):
    rng = np.random.default_rng(100 + b)
    for _ in range(1000):
        x = rng.normal(size=int(rng.integers(1, 64))) * rng.uniform(0.01, 100)
        codes, p = quantize_group(x, b)
        assert codes.max() <= 2**b - 1
        err = np.abs(dequantize_group(codes, p) - x).max()
        assert err <= p.scale / 2 + 1e-6 * (x.max() - x.min())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=50),
       st.sampled_from([2, 4, 8, 16]))
def test_codes_monotone_in_x(xs, b):
    codes, p = quantize_group(xs, b)
    order = np.argsort(xs, kind="stable")
    assert np.all(np.diff(codes[order].astype(int)) >= 0)


def test_pack_layout_examples():
    assert pack([3, 0, 1, 2], 2) == bytes([0b10_01_00_11]) == b"\x93"
    assert pack([0xA, 0xB], 4) == b"\xba"
    assert pack([0x1234], 16) == b"\x34\x12"


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError):
        pack([4], 2)
    with pytest.raises(ValueError):
        pack([-1], 8)


def bit_oracle_pack(codes, b):
    """Pack by setting individual bits: code j's bit k lands at stream bit j*b + k."""
    out = bytearray(packed_len(len(codes), b))
    for j, c in enumerate(codes):
        for k in range(b):
            if (c >> k) & 1:
                pos = j * b + k
                out[pos // 8] |= 1 << (pos % 8)
    return bytes(out)


@pytest.mark.parametrize("b", [2, 4])
def test_pack_exhaustive_short_vectors(b):
    # every vector of length <= 4 over the full alphabet, plus random
    # vectors up to length 8 against the bit-level oracle
    levels = range(2**b)
    for n in range(0, 5):
        for codes in itertools.product(levels, repeat=n):
            buf = pack(codes, b)
            assert buf == bit_oracle_pack(codes, b)
            assert unpack(buf, n, b).tolist() == list(codes)


def test_pack_exhaustive_length_8_two_bit():
    for codes in itertools.product(range(4), repeat=8):
        buf = pack(codes, 2)
        assert unpack(buf, 8, 2).tolist() == list(codes)


@pytest.mark.parametrize("b", [2, 4, 8, 16])
def test_pack_random_lengths(b):
    rng = np.random.default_rng(b)
    for n in range(0, 9):
        for _ in range(200):
            codes = rng.integers(0, 2**b, n).tolist()
            buf = pack(codes, b)
            assert len(buf) == packed_len(n, b)
            assert buf == bit_oracle_pack(codes, b)
            assert unpack(buf, n, b).tolist() == codes


def test_eight_bit_exhaustive_pairs():
    for a in range(256):
        for c in (0, 1, 127, 128, 255):
            assert unpack(pack([a, c], 8), 2, 8).tolist() == [a, c]


def test_group_counting():
    t = Tensor.from_array(np.random.default_rng(0).normal(size=(256, 4)))
    pt = quantize_tensor(t, 2, GroupSpec("token", 128))
    assert pt.n_groups == 8
    assert len(pt.scales) == len(pt.zero_points) == 8


def test_constant_tensor_exact():
    t = Tensor.from_array(np.full((10, 3), 2.5))
    pt = quantize_tensor(t, 2)
    assert not pt.code_matrix().any()
    assert dequantize_tensor(pt) == t


def test_trailing_partial_group():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(300, 8)).astype(np.float32)
    pt = quantize_tensor(Tensor.from_array(x), 4, GroupSpec("token", 128))
    assert pt.n_groups == 3 * 8
    # tail group uses only its own 44 tokens
    tail = x[256:, 0].astype(np.float64)
    codes, p = quantize_group(tail, 4)
    assert pt.code_matrix()[256:, 0].tolist() == codes.tolist()
    back = dequantize_tensor(pt).array().astype(np.float64)
    scale = np.repeat(pt.scales.reshape(-1, 8), [128, 128, 44], axis=0)
    span = np.repeat((pt.scales * 15).reshape(-1, 8), [128, 128, 44], axis=0)
    assert np.all(np.abs(back - x) <= scale / 2 + 1e-6 * span + 1e-6)


@pytest.mark.parametrize("axis", ["token", "channel"])
@pytest.mark.parametrize("b", [2, 4, 8, 16])
def test_byte_length_formula(axis, b):
    rng = np.random.default_rng(0)
    T, C, g = 37, 10, 8
    pt = quantize_tensor(Tensor.from_array(rng.normal(size=(T, C))), b, GroupSpec(axis, g))
    along, other = (T, C) if axis == "token" else (C, T)
    lens = [g] * (along // g) + ([along % g] if along % g else [])
    expected = other * sum((n * b + 7) // 8 for n in lens)
    assert len(pt.codes) == expected
    assert pt.nbytes == expected + 8 * pt.n_groups


def test_channel_axis_groups_match_per_row():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(5, 12))
    fq = fake_quant(x, 2, GroupSpec("channel", 8))
    for r in range(5):
        for lo, hi in ((0, 8), (8, 12)):
            codes, p = quantize_group(x[r, lo:hi], 2)
            assert np.allclose(fq[r, lo:hi], dequantize_group(codes, p))


def test_higher_rank_flattened():
    x = np.random.default_rng(3).normal(size=(6, 2, 4))
    pt = quantize_tensor(Tensor.from_array(x), 8, GroupSpec("token", 4))
    assert pt.dims == (6, 2, 4)
    assert dequantize_tensor(pt).dims == (6, 2, 4)


def test_empty_rejected():
    with pytest.raises(ValueError):
        quantize_tensor(Tensor((0, 4), "float32", []), 2)


def test_packed_tensor_validates():
    pt = quantize_tensor(Tensor.from_array(np.arange(8.0).reshape(4, 2)), 2, GroupSpec("token", 4))
    with pytest.raises(ValueError):
        PackedTensor(pt.dims, 2, pt.group_spec, pt.scales[:1], pt.zero_points[:1], pt.codes)
    with pytest.raises(ValueError):
        PackedTensor(pt.dims, 2, pt.group_spec, pt.scales, pt.zero_points, pt.codes + b"\0")


def test_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    pt = quantize_tensor(Tensor.from_array(rng.normal(size=(33, 6))), 4, GroupSpec("channel", 4))
    save_packed(pt, str(tmp_path / "x"))
    back = load_packed(str(tmp_path / "x"))
    assert back.codes == pt.codes
    assert back.dims == pt.dims and back.bit_width == 4 and back.group_spec == pt.group_spec
    assert np.allclose(back.scales, pt.scales, rtol=1e-7)
