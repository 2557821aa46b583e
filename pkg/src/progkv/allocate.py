"""Block-wise bit-width allocation as a multiple-choice knapsack.

Pick one width per block so the summed memory fits the budget and the summed
sensitivity is minimal. Among optimal plans the one with fewer total bytes
wins, then the lexicographically smallest width vector (by block index).

:func:`solve` runs an exact dynamic program over memory measured in units of
the gcd of all costs. When that table would exceed ``DP_CELL_CAP`` cells it
switches to branch-and-bound with the LP-relaxation bound. :func:`brute_force`
enumerates every assignment and exists as an oracle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InfeasibleBudgetError
from .sensitivity import SensitivityTable

DP_CELL_CAP = 10**8
BRUTE_FORCE_MAX_BLOCKS = 20
_TIE_RTOL = 1e-12


@dataclass
class AllocationPlan:
    choice: list[int]
    objective: float
    bytes_used: int
    budget: int

    def to_dict(self):
        return {"choice": [int(b) for b in self.choice], "objective": float(self.objective),
                "bytes_used": int(self.bytes_used), "budget": int(self.budget)}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"choice", "objective", "bytes_used", "budget"}
        if unknown:
            raise ConfigError(f"unknown allocation plan keys: {sorted(unknown)}")
        return cls([int(b) for b in d["choice"]], float(d["objective"]),
                   int(d["bytes_used"]), int(d["budget"]))


class _Problem:
    """Table re-indexed with options sorted by width."""

    def __init__(self, table: SensitivityTable, budget: int):
        if table.blocks < 1:
            raise ConfigError("allocation needs at least one block")
        if len(set(table.options)) != len(table.options):
            raise ConfigError("duplicate bit-width options")
        order = sorted(range(len(table.options)), key=lambda j: table.options[j])
        self.widths = [table.options[j] for j in order]
        self.s = np.array([[row[j] for j in order] for row in table.s], dtype=np.float64)
        self.mem = np.array([[row[j] for j in order] for row in table.mem], dtype=np.int64)
        self.budget = int(budget)
        self.n, self.k = self.s.shape
        self.min_budget = int(self.mem.min(axis=1).sum())
        if self.budget < self.min_budget:
            raise InfeasibleBudgetError(self.budget, self.min_budget)

    def plan(self, idx) -> AllocationPlan:
        idx = [int(j) for j in idx]
        obj = math.fsum(self.s[i, j] for i, j in enumerate(idx))
        used = int(sum(int(self.mem[i, j]) for i, j in enumerate(idx)))
        assert used <= self.budget
        return AllocationPlan([self.widths[j] for j in idx], obj, used, self.budget)


def _dp(p: _Problem, unit: int, cap_units: int):
    base = p.mem.min(axis=1)
    extra = (p.mem - base[:, None]) // unit
    width = cap_units + 1
    g = np.full(width, np.inf)
    g[0] = 0.0
    choice = np.zeros((p.n, width), dtype=np.int8)
    for i in range(p.n - 1, -1, -1):
        best = np.full(width, np.inf)
        pick = choice[i]
        for j in range(p.k):
            d = int(extra[i, j])
            if d > cap_units:
                continue
            cand = np.full(width, np.inf)
            cand[d:] = p.s[i, j] + g[: width - d]
            better = cand < best
            best[better] = cand[better]
            pick[better] = j
        g = best
    finite = np.isfinite(g)
    obj = g[finite].min()
    w = int(np.flatnonzero(g == obj)[0])
    idx = []
    for i in range(p.n):
        j = int(choice[i, w])
        idx.append(j)
        w -= int(extra[i, j])
    return idx


def _hull(s_row, m_row):
    """Lower convex hull of options as increments ``(dm, ds)`` beyond the cheapest."""
    pts = sorted(zip(m_row.tolist(), s_row.tolist()))
    lo = [pts[0]]
    for m, s in pts[1:]:
        if m == lo[-1][0]:
            if s < lo[-1][1]:
                lo[-1] = (m, s)
            continue
        if s >= min(x[1] for x in lo):
            continue
        while len(lo) >= 2:
            (m1, s1), (m2, s2) = lo[-2], lo[-1]
            if (s2 - s1) * (m - m1) >= (s - s1) * (m2 - m1):
                lo.pop()
            else:
                break
        lo.append((m, s))
    base = lo[0]
    incs = [(b[0] - a[0], b[1] - a[1]) for a, b in zip(lo, lo[1:])]
    return base, incs


def _branch_and_bound(p: _Problem):
    hulls = [_hull(p.s[i], p.mem[i]) for i in range(p.n)]
    base_m = np.array([h[0][0] for h in hulls])
    base_s = np.array([h[0][1] for h in hulls])
    suffix_m = np.concatenate([np.cumsum(base_m[::-1])[::-1], [0]])
    suffix_s = np.concatenate([np.cumsum(base_s[::-1])[::-1], [0.0]])
    suffix_incs = [None] * (p.n + 1)
    suffix_incs[p.n] = []
    for i in range(p.n - 1, -1, -1):
        merged = suffix_incs[i + 1] + hulls[i][1]
        suffix_incs[i] = sorted(merged, key=lambda t: t[1] / t[0])

    def bound(i, room):
        # room is the capacity left for blocks i.. beyond their cheapest hull points
        room -= suffix_m[i]
        if room < 0:
            return math.inf
        val = suffix_s[i]
        for dm, ds in suffix_incs[i]:
            if room <= 0:
                break
            take = min(1.0, room / dm)
            val += take * ds
            room -= take * dm
        return val

    min_suffix_mem = np.concatenate([np.cumsum(p.mem.min(axis=1)[::-1])[::-1], [0]])
    order = [sorted(range(p.k), key=lambda j: (p.s[i, j], p.mem[i, j], j)) for i in range(p.n)]
    best = {"key": None, "idx": None}
    cur = []

    def key_of(obj, used, idx):
        return (obj, used, tuple(idx))

    def visit(i, obj, room):
        if i == p.n:
            k = key_of(obj, p.budget - room, cur)
            if best["key"] is None or k < best["key"]:
                best["key"], best["idx"] = k, list(cur)
            return
        if best["key"] is not None:
            b = obj + bound(i, room)
            top = best["key"][0]
            if b > top + _TIE_RTOL * abs(top):
                return
        for j in order[i]:
            m = int(p.mem[i, j])
            if m + min_suffix_mem[i + 1] > room:
                continue
            cur.append(j)
            visit(i + 1, obj + p.s[i, j], room - m)
            cur.pop()

    visit(0, 0.0, p.budget)
    return best["idx"]


def solve(table: SensitivityTable, budget: int, cell_cap: int = DP_CELL_CAP) -> AllocationPlan:
    """Provably optimal plan for ``budget`` bytes."""
    p = _Problem(table, budget)
    unit = int(np.gcd.reduce(p.mem.reshape(-1)))
    cap_units = (p.budget - p.min_budget) // unit
    max_extra = int((p.mem.max(axis=1) - p.mem.min(axis=1)).sum()) // unit
    cap_units = min(cap_units, max_extra)
    if p.n * (cap_units + 1) <= cell_cap and p.k <= 127:
        return p.plan(_dp(p, unit, cap_units))
    return p.plan(_branch_and_bound(p))


def brute_force(table: SensitivityTable, budget: int) -> AllocationPlan:
    """Exhaustive optimum over all ``|B|^N`` assignments (oracle)."""
    p = _Problem(table, budget)
    if p.n > BRUTE_FORCE_MAX_BLOCKS:
        raise ValueError(f"brute force refuses {p.n} blocks (limit {BRUTE_FORCE_MAX_BLOCKS})")
    tail = min(p.n, max(1, int(math.log(2e5, p.k)) if p.k > 1 else p.n))
    head = p.n - tail
    tail_idx = np.array(list(itertools.product(range(p.k), repeat=tail)), dtype=np.int64)
    tail_idx = tail_idx.reshape(-1, tail)
    rows = np.arange(head, p.n)
    tail_mem = p.mem[rows, tail_idx].sum(axis=1)
    best = None
    for prefix in itertools.product(range(p.k), repeat=head):
        pre_s = [p.s[i, j] for i, j in enumerate(prefix)]
        pre_m = sum(int(p.mem[i, j]) for i, j in enumerate(prefix))
        # left-to-right summation, same order as AllocationPlan.objective
        obj = np.full(len(tail_idx), math.fsum(pre_s)) if pre_s else np.zeros(len(tail_idx))
        acc = np.zeros(len(tail_idx))
        for c, i in enumerate(rows):
            acc = acc + p.s[i, tail_idx[:, c]]
        obj = obj + acc
        used = pre_m + tail_mem
        ok = used <= p.budget
        if not ok.any():
            continue
        objs = np.where(ok, obj, np.inf)
        m = objs.min()
        cands = np.flatnonzero(objs == m)
        u = used[cands].min()
        first = int(cands[used[cands] == u][0])
        key = (m, int(u))
        if best is None or key < best[0]:
            best = (key, list(prefix) + tail_idx[first].tolist())
    return p.plan(best[1])
