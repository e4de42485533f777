"""Minimum-value covering knapsack.

Pick a subset of items whose total weight is at least ``capacity`` while
the summed value is as small as possible.  Three solvers share one
``Instance``/``Solution`` pair:

* ``solve_greedy``     - take items by ascending value (ties: ascending index)
* ``solve_dp``         - exact dynamic program over capped weight
* ``solve_exhaustive`` - enumerate all subsets; test oracle for n <= 24
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "InfeasibleError",
    "BudgetError",
    "Instance",
    "Solution",
    "solve_greedy",
    "solve_dp",
    "solve_exhaustive",
    "solve",
    "MAX_EXHAUSTIVE_ITEMS",
    "DEFAULT_MAX_CAPACITY",
]

MAX_EXHAUSTIVE_ITEMS = 24
DEFAULT_MAX_CAPACITY = 10**6


class InfeasibleError(ValueError):
    """Total item weight cannot reach the capacity."""


class BudgetError(ValueError):
    """The DP table would exceed its size budget."""


@dataclass(frozen=True)
class Instance:
    values: tuple[float, ...]
    weights: tuple[int, ...]
    capacity: int

    def __init__(self, values: Sequence[float], weights: Sequence[int], capacity: int):
        values = tuple(float(v) for v in values)
        weights = tuple(int(w) for w in weights)
        if len(values) != len(weights):
            raise ValueError(f"{len(values)} values but {len(weights)} weights")
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ValueError("values must be finite and >= 0")
        if any(w <= 0 for w in weights):
            raise ValueError("weights must be positive integers")
        if int(capacity) < 0:
            raise ValueError("capacity must be >= 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "capacity", int(capacity))

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def feasible(self) -> bool:
        return sum(self.weights) >= self.capacity

    def check_feasible(self) -> None:
        if not self.feasible:
            raise InfeasibleError(
                f"capacity {self.capacity} exceeds total available weight {sum(self.weights)}"
            )

    def make_solution(self, chosen, solver: str) -> "Solution":
        chosen = tuple(sorted(int(i) for i in chosen))
        value = 0.0
        for i in chosen:
            value += self.values[i]
        return Solution(chosen, value, sum(self.weights[i] for i in chosen), solver)

    def to_dict(self) -> dict:
        return {"values": list(self.values), "weights": list(self.weights), "capacity": self.capacity}


@dataclass(frozen=True)
class Solution:
    chosen: tuple[int, ...]
    total_value: float
    total_weight: int
    solver: str

    def to_dict(self) -> dict:
        return {
            "chosen": list(self.chosen),
            "total_value": self.total_value,
            "total_weight": self.total_weight,
            "solver": self.solver,
        }


def to_json(inst: Instance, sol: Solution | None = None) -> str:
    doc = inst.to_dict()
    if sol is not None:
        doc.update(sol.to_dict())
    return json.dumps(doc, indent=2, sort_keys=True)


def solve_greedy(inst: Instance) -> Solution:
    inst.check_feasible()
    order = sorted(range(inst.n), key=lambda i: (inst.values[i], i))
    chosen, p, k = [], 0, 0
    while p < inst.capacity:
        i = order[k]
        p += inst.weights[i]
        chosen.append(i)
        k += 1
    return inst.make_solution(chosen, "greedy")


def _dp_cover(values: Sequence[float], weights: Sequence[int], cap: int) -> list[int]:
    """best[j] = min value of a subset of items seen so far with weight >= j.

    Weight beyond ``cap`` is clipped, so the row has ``cap + 1`` cells.  An
    item is taken only when it strictly improves the cell, which makes the
    reconstruction deterministic.
    """
    n = len(values)
    best = np.full(cap + 1, np.inf)
    best[0] = 0.0
    take = np.zeros((n, cap + 1), dtype=bool)
    for i, (v, w) in enumerate(zip(values, weights)):
        if w == 0:
            continue
        shifted = np.empty_like(best)
        k = min(w, cap + 1)
        shifted[:k] = best[0]
        shifted[k:] = best[: cap + 1 - k]
        cand = shifted + v
        better = cand < best
        take[i] = better
        best = np.where(better, cand, best)
    if not np.isfinite(best[cap]):
        raise InfeasibleError("no subset reaches the capacity")
    chosen, j = [], cap
    for i in range(n - 1, -1, -1):
        if j == 0:
            break
        if take[i, j]:
            chosen.append(i)
            j = max(0, j - weights[i])
    return chosen


def solve_dp(inst: Instance, granularity: int | None = 1, max_capacity: int = DEFAULT_MAX_CAPACITY) -> Solution:
    """Exact for ``granularity=1``.

    With ``g > 1`` item weights become ``floor(w / g)`` and the capacity
    ``ceil(P / g)``; any subset feasible after scaling is feasible before.
    When flooring leaves the scaled instance infeasible, ``g`` is halved
    until it is not (``g = 1`` always works for a feasible instance).
    ``granularity=None`` picks the smallest ``g`` that keeps the scaled
    capacity within ``max_capacity``.
    """
    inst.check_feasible()
    if inst.capacity == 0:
        return inst.make_solution((), "dp")
    if granularity is None:
        granularity = max(1, -(-inst.capacity // max_capacity))
    g = int(granularity)
    if g < 1:
        raise ValueError("granularity must be >= 1")
    while True:
        cap = -(-inst.capacity // g)
        weights = [w // g for w in inst.weights]
        if sum(weights) >= cap or g == 1:
            break
        g = max(1, g // 2)
    if cap > max_capacity:
        raise BudgetError(
            f"scaled capacity {cap} exceeds the DP budget {max_capacity}; raise granularity to at least "
            f"{-(-inst.capacity // max_capacity)}"
        )
    chosen = _dp_cover(inst.values, weights, cap)
    sol = inst.make_solution(chosen, "dp" if g == 1 else f"dp[g={g}]")
    assert sol.total_weight >= inst.capacity
    return sol


def solve_exhaustive(inst: Instance) -> Solution:
    if inst.n > MAX_EXHAUSTIVE_ITEMS:
        raise ValueError(f"exhaustive search is limited to {MAX_EXHAUSTIVE_ITEMS} items, got {inst.n}")
    inst.check_feasible()
    # subset s contains item i iff bit i of s is set; sums accumulate in index order
    vals = np.zeros(1)
    wts = np.zeros(1, dtype=np.int64)
    for v, w in zip(inst.values, inst.weights):
        vals = np.concatenate([vals, vals + v])
        wts = np.concatenate([wts, wts + w])
    feasible = wts >= inst.capacity
    masked = np.where(feasible, vals, np.inf)
    s = int(np.argmin(masked))
    chosen = [i for i in range(inst.n) if s >> i & 1]
    return inst.make_solution(chosen, "exhaustive")


_SOLVERS = {"greedy": solve_greedy, "dp": solve_dp, "exhaustive": solve_exhaustive}


def solve(inst: Instance, solver: str = "dp", **kwargs) -> Solution:
    try:
        fn = _SOLVERS[solver]
    except KeyError:
        raise ValueError(f"unknown solver {solver!r}; choose from {sorted(_SOLVERS)}") from None
    return fn(inst, **kwargs)
