import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progkv.cache import CacheConfig
from progkv.errors import ConfigError, NumericError
from progkv.quant import GroupSpec
from progkv.sensitivity import (
    SensitivityTable,
    attention_loss,
    attention_loss_and_grads,
    fd_gradient,
    profile_blocks,
    quadratic_loss,
    sensitivity,
    taylor_check,
)

KG, VG = GroupSpec("token", 4), GroupSpec("channel", 4)


def loop_fake_quant(X, b, spec):
    """Element-by-element group quantization, independent of the package."""
    X = np.asarray(X, dtype=np.float64)
    out = np.empty_like(X)
    T, C = X.shape
    along = T if spec.axis == "token" else C
    for o in range(C if spec.axis == "token" else T):
        for lo in range(0, along, spec.group_size):
            hi = min(lo + spec.group_size, along)
            idx = [(i, o) if spec.axis == "token" else (o, i) for i in range(lo, hi)]
            vals = [X[r, c] for r, c in idx]
            mn, mx = min(vals), max(vals)
            s = (mx - mn) / (2**b - 1)
            for (r, c), v in zip(idx, vals):
                q = 0 if s == 0 else min(2**b - 1, int(np.floor((v - mn) / s + 0.5)))
                out[r, c] = mn + s * q
    return out


def test_representable_data_has_zero_sensitivity():
    rng = np.random.default_rng(0)
    K = np.tile(np.arange(4.0)[:, None], (2, 4)) * 0.5 + 1.0    # every token group spans 0..3
    V = np.tile(np.arange(4.0)[None, :], (8, 1)) * 2.0          # every channel group spans 0..3
    gk, gv = rng.normal(size=K.shape), rng.normal(size=V.shape)
    assert sensitivity(K, V, gk, gv, 2, (KG, VG)) == 0.0


def test_scalar_arithmetic():
    K = np.array([[0.0], [1.5], [3.0]])          # b=2: S=1, 1.5 rounds up to 2
    V = np.array([[0.0, 1.0, 2.0, 3.0]] * 3)
    gk = np.array([[0.0], [2.0], [0.0]])
    gv = np.ones_like(V)
    specs = (GroupSpec("token", 3), GroupSpec("channel", 4))
    assert sensitivity(K, V, gk, gv, 2, specs) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("b", [2, 4, 8])
def test_matches_independent_reevaluation(b):
    rng = np.random.default_rng(b)
    K, V = rng.normal(size=(10, 6)) * 3, rng.normal(size=(10, 6))
    gk, gv = rng.normal(size=K.shape), rng.normal(size=V.shape)
    want = (np.abs(gk * (K - loop_fake_quant(K, b, KG))).sum()
            + np.abs(gv * (V - loop_fake_quant(V, b, VG))).sum())
    assert sensitivity(K, V, gk, gv, b, (KG, VG)) == pytest.approx(want, rel=1e-10, abs=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        sensitivity(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 50))
def test_homogeneous_in_gradients(seed, c):
    rng = np.random.default_rng(seed)
    K, V = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    gk, gv = rng.normal(size=K.shape), rng.normal(size=V.shape)
    base = sensitivity(K, V, gk, gv, 2, (KG, VG))
    assert sensitivity(K, V, c * gk, c * gv, 2, (KG, VG)) == pytest.approx(c * base, rel=1e-12, abs=1e-12)
    assert sensitivity(K, V, 0 * gk, 0 * gv, 2, (KG, VG)) == 0.0
    assert base >= 0


def test_average_error_nonincreasing_in_width():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(128, 200)) * rng.uniform(0.1, 10, size=200)
    errs = [np.abs(X - loop_fake_quant(X, b, GroupSpec("token", 128))).mean() for b in (2, 4, 8, 16)]
    assert all(a >= b for a, b in zip(errs, errs[1:]))


def test_fd_sum_of_squares():
    g = fd_gradient(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]))
    assert np.allclose(g, [2, 4], atol=1e-6)


def test_fd_linear_exact():
    c = np.array([[1.5, -2.0], [0.25, 4.0]])
    g = fd_gradient(lambda x: float((c * x).sum()), np.ones((2, 2)))
    assert np.allclose(g, c, rtol=1e-9, atol=1e-9)


def test_analytic_attention_gradients_match_fd():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(4, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    T = rng.normal(size=(4, 8))
    loss, dQ, dK, dV = attention_loss_and_grads(Q, K, V, T)
    assert loss == pytest.approx(attention_loss(Q, K, V, T))
    for analytic, f, X in (
        (dQ, lambda x: attention_loss(x, K, V, T), Q),
        (dK, lambda x: attention_loss(Q, x, V, T), K),
        (dV, lambda x: attention_loss(Q, K, x, T), V),
    ):
        fd = fd_gradient(f, X)
        assert np.linalg.norm(fd - analytic) <= 1e-4 * np.linalg.norm(analytic)


def test_taylor_exact_for_linear_loss():
    rng = np.random.default_rng(3)
    ck, cv = rng.normal(size=(8, 4)), rng.normal(size=(8, 4))
    loss = lambda K, V: float((ck * K).sum() + (cv * V).sum())
    pred, actual = taylor_check(loss, rng.normal(size=(8, 4)), rng.normal(size=(8, 4)), 2, (KG, VG))
    assert pred == pytest.approx(actual, rel=1e-6, abs=1e-9)


def test_taylor_within_ten_percent_at_8_bits():
    rng = np.random.default_rng(4)
    K, V = rng.normal(size=(32, 8)), rng.normal(size=(32, 8))
    loss = quadratic_loss(rng.normal(scale=100, size=K.shape), rng.normal(scale=100, size=V.shape))
    pred, actual = taylor_check(loss, K, V, 8, (KG, VG))
    assert abs(pred - actual) <= 0.1 * abs(actual)


def test_taylor_two_bit_is_diagnostic_only():
    rng = np.random.default_rng(5)
    K, V = rng.normal(size=(16, 4)) * 20, rng.normal(size=(16, 4)) * 20
    loss = quadratic_loss(np.zeros_like(K), np.zeros_like(V))
    pred, actual = taylor_check(loss, K, V, 2, (KG, VG))
    assert np.isfinite(pred) and np.isfinite(actual)


def test_non_finite_loss_rejected():
    with pytest.raises(NumericError):
        taylor_check(lambda K, V: float("inf"), np.ones((2, 2)), np.ones((2, 2)), 2)


def test_table_round_trip_and_validation():
    t = SensitivityTable(2, [2, 4], [[1.0, 0.5], [2.0, 0.1]], [[10, 20], [10, 20]])
    assert SensitivityTable.from_dict(t.to_dict()) == t
    with pytest.raises(ConfigError):
        SensitivityTable(1, [2, 4], [[-1.0, 0.0]], [[1, 2]])
    with pytest.raises(ConfigError):
        SensitivityTable.from_dict({**t.to_dict(), "extra": 1})


def test_profile_blocks_table():
    cfg = CacheConfig(max_context=1024)
    t = profile_blocks(3, (2, 4, 8), tokens=64, head_dim=16, seed=1, config=cfg)
    assert t.blocks == 3 and t.options == [2, 4, 8]
    for row_s, row_m in zip(t.s, t.mem):
        assert row_s[0] > row_s[1] > row_s[2] >= 0
        assert row_m[0] < row_m[1] < row_m[2]
    again = profile_blocks(3, (2, 4, 8), tokens=64, head_dim=16, seed=1, config=cfg)
    assert again == t
