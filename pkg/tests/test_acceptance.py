"""Acceptance criteria, one test per criterion, each at its stated tolerance."""

import itertools
import math
import time

import numpy as np
import pytest

from progkv.allocate import brute_force, solve
from progkv.cache import CacheConfig, KVBlockCache, kv_cache_bytes
from progkv.calib import (
    Quantizer,
    RopeConfig,
    channel_period,
    grid_search_alpha,
    reparam_apply,
    reparam_factors,
    rope,
)
from progkv.quant import GroupSpec, QuantParams, _quantize_rows, pack_rows, unpack_rows
from progkv.selftest import random_table, shift_identity
from progkv.sensitivity import (
    SensitivityTable,
    attention_loss,
    attention_loss_and_grads,
    fd_gradient,
    quadratic_loss,
    sensitivity,
    taylor_check,
)
from progkv.shrink import shrink_chain
from progkv.simulate import Policy, StreamSpec, run, run_policies


def test_criterion_1_shift_identity():
    t0 = time.perf_counter()
    res = shift_identity()
    elapsed = time.perf_counter() - t0
    assert res["cases"] == 65536 + 256 + 16
    assert res["failures"] == 0
    assert elapsed < 1.0


def test_criterion_2_chain_scale_identity():
    rng = np.random.default_rng(2024)
    groups, size = 7813, 128                       # 1,000,064 elements
    x = rng.standard_normal((groups, size)) * rng.uniform(0.01, 100, (groups, 1))
    c16, s16, z16 = _quantize_rows(x, 16)
    c2, s2, z2 = shrink_chain(c16, s16, z16, 2, "equivalent")
    want = s16 * (2**16 - 1) / (2**2 - 1)
    assert np.max(np.abs(s2 - want) / want) <= 1e-12
    single, _, _ = _quantize_rows(x, 2)
    diff = np.abs(c2.astype(np.int64) - single.astype(np.int64))
    assert diff.max() <= 1
    assert np.mean(diff == 0) >= 0.99


def _oracle_pack(codes, b):
    """LSB-first bit stream per row, padded to whole bytes."""
    rows, n = codes.shape
    bits = (codes[:, :, None].astype(np.uint64) >> np.arange(b, dtype=np.uint64)) & np.uint64(1)
    bits = bits.reshape(rows, n * b).astype(np.uint8)
    return np.packbits(bits, axis=1, bitorder="little")


def test_criterion_3_quantization_round_trip():
    rng = np.random.default_rng(3)
    for b in (2, 4, 8, 16):
        x = rng.standard_normal((1000, 64)) * rng.uniform(1e-3, 1e3, (1000, 1)) \
            + rng.uniform(-100, 100, (1000, 1))
        codes, scale, zero = _quantize_rows(x, b)
        recon = zero[:, None] + scale[:, None] * codes
        rng_w = x.max(axis=1) - x.min(axis=1)
        bound = scale / 2 + 1e-6 * rng_w
        assert np.all(np.abs(recon - x) <= bound[:, None])
    # exhaustive over every code vector of length <= 8 where the space fits 2^16,
    # random vectors beyond that
    for b in (2, 4, 8, 16):
        for n in range(1, 9):
            if (1 << b) ** n <= 1 << 16:
                grid = np.array(list(itertools.product(range(1 << b), repeat=n)), dtype=np.uint16)
            else:
                grid = rng.integers(0, 1 << b, size=(20000, n)).astype(np.uint16)
            packed = pack_rows(grid, b)
            assert np.array_equal(packed, _oracle_pack(grid, b))
            assert np.array_equal(unpack_rows(packed, n, b), grid)


def test_criterion_4_allocator_optimality():
    rng = np.random.default_rng(4)
    for _ in range(200):
        table, budget = random_table(rng, int(rng.integers(1, 13)), int(rng.integers(1, 4)))
        a, b = solve(table, budget), brute_force(table, budget)
        assert a.bytes_used <= budget and b.bytes_used <= budget
        assert a.objective == pytest.approx(b.objective, rel=1e-9, abs=1e-12)
    n = 80
    mem = np.stack([rng.integers(100_000, 200_000, n), rng.integers(200_000, 400_000, n)], 1) * 8
    s = np.stack([rng.uniform(1, 10, n), rng.uniform(0, 1, n)], 1)
    table = SensitivityTable(n, [2, 4], s.tolist(), mem.tolist())
    budget = int(mem.sum(axis=0).mean())
    t0 = time.perf_counter()
    plan = solve(table, budget)
    assert time.perf_counter() - t0 < 5
    assert plan.bytes_used <= budget


def test_criterion_5_rope():
    rng = np.random.default_rng(5)
    cfg = RopeConfig(2)
    pairs = rng.standard_normal((100_000, 2)) * 10
    pos = rng.uniform(0, 1e6, 100_000)
    out = rope(pairs, pos, cfg)
    assert np.max(np.abs(np.hypot(*out.T) - np.hypot(*pairs.T))) <= 1e-6
    for s in (0.25, 0.5, 2.0, 4.0):
        K = rng.standard_normal((1000, 128))
        m = rng.integers(0, 32768, 1000)
        a = rope(K, m, RopeConfig(128, scale=s))
        b = rope(K, s * m, RopeConfig(128))
        assert np.max(np.abs(a - b)) <= 1e-6
    period = channel_period(63, RopeConfig(128, base=10000))
    assert abs(period - 54_410) / 54_410 <= 0.005


def _outlier_problem(seed, tokens=256, d=64, queries=32):
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((tokens, d))
    K[:, rng.integers(d)] *= 10
    return rng.standard_normal((queries, d)), K, rng.standard_normal((tokens, d))


def test_criterion_6_reparameterization():
    for seed in range(100):
        Q, K, _ = _outlier_problem(seed)
        alpha = np.random.default_rng(seed).uniform()
        P, ref = reparam_apply(Q, K, reparam_factors(K, alpha), Quantizer(None))
        assert np.linalg.norm(P - ref) <= 1e-5 * np.linalg.norm(ref)
    q = Quantizer(2, GroupSpec("channel", 64))
    wins = 0
    for seed in range(50):
        Q, K, V = _outlier_problem(1000 + seed)
        alpha, losses = grid_search_alpha(Q, K, V, q)
        assert len(losses) == 20
        assert losses[int(round(alpha * 19))] <= min(losses[0], losses[-1])
        P0, ref = reparam_apply(Q, K, reparam_factors(K, 0.0), q)
        P1, _ = reparam_apply(Q, K, reparam_factors(K, 0.5), q)
        wins += np.linalg.norm(P1 - ref) < np.linalg.norm(P0 - ref)
    assert wins >= 45


def test_criterion_7_progressive_dominance():
    # budget sized for twice the stream so the run exercises several shrink
    # epochs while the final tier stays ahead of the stream end
    cfg = CacheConfig(fbit=2, window=0, keep_first=0, max_context=8192)
    t0 = time.perf_counter()
    for seed in range(20):
        stream = StreamSpec(seed=seed, steps=4096, heads=1, head_dim=32)
        t = run_policies(["immediate", "progressive"], [cfg], stream)
        p, i = t["progressive"].mse[0], t["immediate"].mse[0]
        assert t["progressive"].budgets == t["immediate"].budgets
        assert np.all(p <= i + 1e-6), f"seed {seed}"
        final = [a for a, _, to in t["progressive"].epochs[0] if to == cfg.fbit]
        stop = final[0] if final else len(p)
        assert np.all(p[:stop] < i[:stop]), f"seed {seed}"
        assert len(t["progressive"].epochs[0]) >= 2
    assert time.perf_counter() - t0 < 120


def test_criterion_8_memory_accounting():
    total = kv_cache_bytes(layers=32, batch=16, tokens=32 * 1024, heads=8, head_dim=128, b=16)
    assert total == 64 * 2**30
    # every append asserts bytes_used <= budget; drive each policy and width
    g = dict(key_groups=GroupSpec("token", 32), value_groups=GroupSpec("channel", 32))
    for fbit, strategy, window in itertools.product((2, 4, 8), ("equivalent", "direct", "modified"),
                                                    (0, 16)):
        cfg = CacheConfig(fbit=fbit, strategy=strategy, window=window, max_context=600, **g)
        stream = StreamSpec(seed=fbit, steps=600, heads=2, head_dim=16, blocks=2)
        for kind in ("immediate", "progressive"):
            tr = run(Policy(kind, [cfg]), stream)
            assert np.all(tr.bytes <= np.array(tr.budgets)[:, None])


def _loop_fake_quant(X, b, spec):
    X = np.asarray(X, dtype=np.float64)
    out = np.empty_like(X)
    T, C = X.shape
    along = T if spec.axis == "token" else C
    for o in range(C if spec.axis == "token" else T):
        for lo in range(0, along, spec.group_size):
            idx = [(r, o) if spec.axis == "token" else (o, r)
                   for r in range(lo, min(lo + spec.group_size, along))]
            vals = [X[i] for i in idx]
            mn, s = min(vals), (max(vals) - min(vals)) / (2**b - 1)
            for i, v in zip(idx, vals):
                out[i] = mn + s * (0 if s == 0 else min(2**b - 1, math.floor((v - mn) / s + 0.5)))
    return out


def test_criterion_9_sensitivity():
    rng = np.random.default_rng(9)
    Q, K, V, T = (rng.standard_normal(sh) for sh in ((4, 8), (6, 8), (6, 8), (4, 8)))
    _, dQ, dK, dV = attention_loss_and_grads(Q, K, V, T)
    for analytic, f, X in ((dQ, lambda x: attention_loss(x, K, V, T), Q),
                           (dK, lambda x: attention_loss(Q, x, V, T), K),
                           (dV, lambda x: attention_loss(Q, K, x, T), V)):
        fd = fd_gradient(f, X)
        assert np.linalg.norm(fd - analytic) <= 1e-4 * np.linalg.norm(analytic)
    tk, tv = rng.standard_normal((16, 8)), rng.standard_normal((16, 8))
    Kq, Vq = rng.standard_normal((16, 8)), rng.standard_normal((16, 8))
    fd = fd_gradient(lambda x: quadratic_loss(tk, tv)(x, Vq), Kq)
    assert np.linalg.norm(fd - (Kq - tk)) <= 1e-4 * np.linalg.norm(Kq - tk)

    specs = (GroupSpec("token", 4), GroupSpec("channel", 4))
    gk, gv = rng.standard_normal(Kq.shape), rng.standard_normal(Vq.shape)
    for b in (2, 4, 8):
        want = (np.abs(gk * (Kq - _loop_fake_quant(Kq, b, specs[0]))).sum()
                + np.abs(gv * (Vq - _loop_fake_quant(Vq, b, specs[1]))).sum())
        assert sensitivity(Kq, Vq, gk, gv, b, specs) == pytest.approx(want, rel=1e-10)

    loss = quadratic_loss(rng.normal(scale=100, size=(32, 8)), rng.normal(scale=100, size=(32, 8)))
    pred, actual = taylor_check(loss, rng.standard_normal((32, 8)), rng.standard_normal((32, 8)),
                                8, specs)
    assert abs(pred - actual) <= 0.1 * abs(actual)
