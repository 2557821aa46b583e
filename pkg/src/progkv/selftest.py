"""Built-in invariant suites run by ``progkv selftest``."""

from __future__ import annotations

import time

import numpy as np

from .allocate import brute_force, solve
from .quant import QuantParams, dequantize_group, quantize_with_params, round_half_away
from .sensitivity import SensitivityTable
from .shrink import shrink_equivalent


def shift_identity(scale: float = 0.1, zero: float = -1.25) -> dict:
    """Integer shift vs exact division vs dequantize-requantize, every code."""
    t0 = time.perf_counter()
    checked = failures = 0
    for b in (2, 4, 8):
        x = np.arange(1 << (2 * b), dtype=np.int64)
        p = QuantParams(scale, zero)
        shifted, p_b = shrink_equivalent(x, b, p)
        exact = round_half_away(x / ((1 << b) + 1)).astype(np.int64)
        requant = quantize_with_params(dequantize_group(x, p), b, p_b).astype(np.int64)
        bad = (shifted.astype(np.int64) != exact) | (exact != requant)
        checked += x.size
        failures += int(bad.sum())
    return {"name": "shift_identity", "cases": checked, "failures": failures,
            "seconds": time.perf_counter() - t0, "ok": failures == 0}


def random_table(rng: np.random.Generator, blocks: int, options: int) -> tuple[SensitivityTable, int]:
    widths = sorted(rng.choice([2, 4, 8], size=options, replace=False).tolist())
    steps = rng.integers(1, 40, size=(blocks, options))
    mem = np.cumsum(steps, axis=1)
    s = rng.uniform(0.0, 10.0, size=(blocks, options))
    lo, hi = int(mem.min(axis=1).sum()), int(mem.max(axis=1).sum())
    budget = int(rng.integers(lo, hi + 1))
    return SensitivityTable(blocks, widths, s.tolist(), mem.tolist()), budget


def knapsack_oracle(instances: int = 200, max_blocks: int = 12, max_options: int = 3,
                    seed: int = 0) -> dict:
    """Exact solver against exhaustive enumeration on random instances."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    failures = []
    for k in range(instances):
        n = int(rng.integers(1, max_blocks + 1))
        m = int(rng.integers(1, max_options + 1))
        table, budget = random_table(rng, n, m)
        a, b = solve(table, budget), brute_force(table, budget)
        tol = 1e-9 * max(1.0, abs(b.objective))
        if abs(a.objective - b.objective) > tol or a.bytes_used > budget:
            failures.append(k)
    return {"name": "knapsack_oracle", "cases": instances, "failures": len(failures),
            "failed_instances": failures, "seconds": time.perf_counter() - t0,
            "ok": not failures}


def run_all(seed: int = 0) -> dict:
    suites = [shift_identity(), knapsack_oracle(seed=seed)]
    return {"ok": all(s["ok"] for s in suites), "suites": suites}
