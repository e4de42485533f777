"""Additivity validation: summed single-removal values vs. joint removal.

For a removal set R the approximated criterion is the sum of the table
values of its layers; the real criterion removes all of R at once and
measures the same discrepancy on the same calibration tuples.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .criteria import CriterionKind, LayerTable, REMOVAL_CRITERIA, build_table, reference_outputs, removal_discrepancy
from .toynet import LayerError, LayerId

log = logging.getLogger(__name__)

__all__ = [
    "AdditivityPoint",
    "BucketStats",
    "SweepSummary",
    "ChainCheck",
    "real_criterion",
    "approx_criterion",
    "sample_subset",
    "evaluate_subsets",
    "sweep",
    "pearson_r",
    "chain_check",
    "scatter_csv",
    "summary_csv",
]

REL_FLOOR = 1e-12


def real_criterion(net, calib, removal: Iterable[LayerId], kind=CriterionKind.OUTPUT_LOSS, score=None,
                   reference=None) -> float:
    removal = frozenset(removal)
    prunable = set(net.prunable)
    bad = [l for l in removal if l not in prunable]
    if bad:
        raise LayerError(f"not prunable layers of this network: {sorted(map(str, bad))}")
    return removal_discrepancy(net, calib, removal, kind, score, reference=reference)


def approx_criterion(table: LayerTable, removal: Iterable[LayerId]) -> float:
    lookup = {r.layer: r.value for r in table.rows}
    total = 0.0
    for layer in sorted(frozenset(removal)):
        if layer not in lookup:
            raise LayerError(f"{layer} has no row in the table")
        total += lookup[layer]
    return total


@dataclass(frozen=True)
class AdditivityPoint:
    criterion: CriterionKind
    subset: tuple[LayerId, ...]
    target_ratio: float
    ratio: float
    approx: float
    real: float


@dataclass(frozen=True)
class BucketStats:
    target_ratio: float
    n_points: int
    pearson_r: float
    mean_rel_dev: float


@dataclass
class SweepSummary:
    criterion: CriterionKind
    points: list[AdditivityPoint]
    pearson_r: float
    mean_rel_dev: float
    buckets: list[BucketStats] = field(default_factory=list)
    skipped: list[float] = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return len(self.points)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; degenerate (constant) inputs give 1.0 when the
    two series coincide and 0.0 otherwise."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return 1.0 if np.allclose(x, y, rtol=1e-9, atol=0.0) else 0.0
    r = float(np.corrcoef(x, y)[0, 1])
    return max(-1.0, min(1.0, r))


def _rel_dev(approx, real) -> float:
    approx, real = np.asarray(approx, dtype=float), np.asarray(real, dtype=float)
    if approx.size == 0:
        return 0.0
    return float(np.mean(np.abs(approx - real) / np.maximum(real, REL_FLOOR)))


def sample_subset(rng: np.random.Generator, layers: Sequence[LayerId], weights: Sequence[int], total: int,
                  target: float, tol: float = 0.02, max_tries: int = 1000) -> tuple[LayerId, ...] | None:
    """Random removal set whose parameter mass lies within ``target +- tol``
    of ``total``.

    Each try walks a uniformly random permutation of the layers and stops
    once the lower bound is reached; the try is rejected if it overshoots.
    """
    lo, hi = (target - tol) * total, (target + tol) * total
    for _ in range(max_tries):
        order = rng.permutation(len(layers))
        mass, chosen = 0, []
        for i in order:
            if mass >= lo:
                break
            chosen.append(i)
            mass += weights[i]
        if lo <= mass <= hi:
            return tuple(layers[i] for i in sorted(chosen))
    return None


def evaluate_subsets(net, calib, table: LayerTable, subsets: Iterable[Iterable[LayerId]], score=None,
                     target_ratio: float = math.nan, reference=None) -> list[AdditivityPoint]:
    ref = reference_outputs(net, calib) if reference is None else reference
    total = net.total_params()
    points = []
    for subset in subsets:
        subset = tuple(sorted(subset))
        real = real_criterion(net, calib, subset, table.kind, score, reference=ref)
        ratio = sum(net.param_count(l) for l in subset) / total
        points.append(AdditivityPoint(table.kind, subset, target_ratio, ratio, approx_criterion(table, subset), real))
    return points


def sweep(net, calib, kind, ratios: Sequence[float], per_ratio: int = 50, seed: int = 0, score=None,
          table: LayerTable | None = None, tol: float = 0.02, max_tries: int = 1000) -> SweepSummary:
    kind = CriterionKind(kind)
    if kind not in REMOVAL_CRITERIA:
        raise ValueError(f"{kind.value} has no joint-removal counterpart")
    if per_ratio < 1:
        raise ValueError("per_ratio must be >= 1")
    if table is None:
        table = build_table(net, calib, kind, score if kind is CriterionKind.DELTA_SCORE else None)
    ref = reference_outputs(net, calib)
    layers, weights = table.layers, table.weights
    total = net.total_params()
    rng = np.random.default_rng(seed)
    points, buckets, skipped = [], [], []
    for target in ratios:
        subsets = []
        for _ in range(per_ratio):
            s = sample_subset(rng, layers, weights, total, target, tol, max_tries)
            if s is None:
                break
            subsets.append(s)
        if len(subsets) < per_ratio:
            log.warning("ratio %.3f unattainable within +-%.3f after %d tries; bucket skipped", target, tol, max_tries)
            skipped.append(target)
            continue
        pts = evaluate_subsets(net, calib, table, subsets, score, target, reference=ref)
        points.extend(pts)
        buckets.append(BucketStats(target, len(pts), pearson_r([p.approx for p in pts], [p.real for p in pts]),
                                   _rel_dev([p.approx for p in pts], [p.real for p in pts])))
    approx = [p.approx for p in points]
    real = [p.real for p in points]
    return SweepSummary(kind, points, pearson_r(approx, real), _rel_dev(approx, real), buckets, skipped)


@dataclass(frozen=True)
class ChainCheck:
    """Telescoped decomposition of a joint removal along one ordering.

    ``steps[k]`` is the mean squared output change caused by removing the
    k-th layer of the chain from the network that already lacks the
    earlier ones.
    """

    order: tuple[LayerId, ...]
    real: float
    steps: tuple[float, ...]

    @property
    def squared_sum(self) -> float:
        return float(sum(self.steps))

    @property
    def distance_sum(self) -> float:
        return float(sum(math.sqrt(s) for s in self.steps))

    @property
    def squared_bound_holds(self) -> bool:
        return self.real <= self.squared_sum * (1 + 1e-12)

    @property
    def distance_bound_holds(self) -> bool:
        return math.sqrt(self.real) <= self.distance_sum * (1 + 1e-12)

    @property
    def squared_shortfall(self) -> float:
        """How far the squared-form chain sum falls below the joint loss (0 if it does not)."""
        return max(0.0, self.real - self.squared_sum)


def chain_check(net, calib, order: Sequence[LayerId]) -> ChainCheck:
    order = tuple(order)
    ref = reference_outputs(net, calib)
    prev_net, steps = net, []
    for layer in order:
        prev_out = reference_outputs(prev_net, calib)
        nxt = prev_net.remove_layers({layer})
        d = (reference_outputs(nxt, calib) - prev_out).reshape(len(calib), -1)
        steps.append(float(np.mean(np.mean(d * d, axis=1))))
        prev_net = nxt
    real = real_criterion(net, calib, order, CriterionKind.OUTPUT_LOSS, reference=ref)
    return ChainCheck(order, real, tuple(steps))


def scatter_csv(summaries: Iterable[SweepSummary]) -> str:
    buf = io.StringIO()
    buf.write("criterion,ratio,approx,real\n")
    for s in summaries:
        for p in s.points:
            buf.write(f"{s.criterion.value},{p.ratio:.17g},{p.approx:.17g},{p.real:.17g}\n")
        for target in s.skipped:
            buf.write(f"{s.criterion.value},{target:.17g},nan,nan\n")
    return buf.getvalue()


def summary_csv(summaries: Iterable[SweepSummary]) -> str:
    buf = io.StringIO()
    buf.write("criterion,pearson_r,mean_rel_dev,n_points\n")
    for s in summaries:
        buf.write(f"{s.criterion.value},{s.pearson_r:.17g},{s.mean_rel_dev:.17g},{s.n_points}\n")
    return buf.getvalue()
