"""Per-layer importance values: the knapsack item table.

Removal-based criteria (output loss, delta task loss, delta score) share
one code path, :func:`removal_discrepancy`, which is also what the
additivity module calls for joint removals.  That keeps the single-layer
value and the m=1 joint value bit-identical.
"""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .diffusion import Batch, per_sample_task_loss
from .toynet import LayerError, LayerId, LayerKind, Stage

__all__ = [
    "CriterionKind",
    "ProxyScore",
    "TableRow",
    "LayerTable",
    "reference_outputs",
    "removal_discrepancy",
    "eval_output_loss",
    "eval_delta_task_loss",
    "eval_delta_score",
    "eval_magnitude",
    "eval_taylor",
    "build_table",
    "REMOVAL_CRITERIA",
]


class CriterionKind(str, enum.Enum):
    OUTPUT_LOSS = "output_loss"
    DELTA_TASK_LOSS = "delta_task_loss"
    DELTA_SCORE = "delta_score"
    MAGNITUDE = "magnitude"
    TAYLOR = "taylor"


REMOVAL_CRITERIA = (CriterionKind.OUTPUT_LOSS, CriterionKind.DELTA_TASK_LOSS, CriterionKind.DELTA_SCORE)

ScoreFunction = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


class ProxyScore:
    """Cosine similarity between a prediction and a class-dependent target.

    The target for class ``y`` is a seeded random embedding of ``y`` pushed
    through a seeded random linear map into output space.  Batched inputs
    give one score per sample.
    """

    def __init__(self, seed: int, out_shape: tuple[int, int], num_classes: int = 8, embed_dim: int = 8):
        rng = np.random.default_rng(seed)
        emb = rng.normal(size=(num_classes, embed_dim))
        proj = rng.normal(size=(embed_dim, int(np.prod(out_shape)))) / np.sqrt(embed_dim)
        self.targets = emb @ proj
        self.seed = seed

    def __call__(self, eps_pred, z, y):
        pred = np.asarray(eps_pred, dtype=np.float64)
        y = np.asarray(y)
        single = y.ndim == 0
        flat = pred.reshape(1 if single else y.shape[0], -1)
        tgt = self.targets[np.atleast_1d(y)]
        num = np.sum(flat * tgt, axis=1)
        den = np.linalg.norm(flat, axis=1) * np.linalg.norm(tgt, axis=1)
        cos = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        return float(cos[0]) if single else cos


def reference_outputs(net, calib: Batch) -> np.ndarray:
    with ad.no_grad():
        out, _ = net.forward(calib.z_t, calib.y, calib.t)
    return out.data


def _per_sample_metric(kind: CriterionKind, out, ref, calib: Batch, score) -> np.ndarray:
    if kind is CriterionKind.OUTPUT_LOSS:
        d = (out - ref).reshape(out.shape[0], -1)
        return np.mean(d * d, axis=1)
    if kind is CriterionKind.DELTA_TASK_LOSS:
        return np.abs(per_sample_task_loss(out, calib.eps) - per_sample_task_loss(ref, calib.eps))
    if kind is CriterionKind.DELTA_SCORE:
        if score is None:
            raise ValueError("delta_score needs a score function")
        return np.abs(np.asarray(score(out, calib.z, calib.y)) - np.asarray(score(ref, calib.z, calib.y)))
    raise ValueError(f"{kind.value} is not a removal criterion")


def removal_discrepancy(net, calib: Batch, removal: Iterable[LayerId], kind=CriterionKind.OUTPUT_LOSS,
                        score=None, reference: np.ndarray | None = None) -> float:
    """Paired-tuple mean discrepancy between ``net`` and ``net`` minus ``removal``."""
    kind = CriterionKind(kind)
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    removal = frozenset(removal)
    ref = reference_outputs(net, calib) if reference is None else reference
    if not removal:
        return 0.0
    out = reference_outputs(net.remove_layers(removal), calib)
    return float(np.mean(_per_sample_metric(kind, out, ref, calib, score)))


def _check_prunable(net, layer: LayerId) -> None:
    if layer not in net.prunable:
        raise LayerError(f"{layer} is not a prunable layer of this network")


def eval_output_loss(net, calib, layer, reference=None) -> float:
    _check_prunable(net, layer)
    return removal_discrepancy(net, calib, {layer}, CriterionKind.OUTPUT_LOSS, reference=reference)


def eval_delta_task_loss(net, calib, layer, reference=None) -> float:
    _check_prunable(net, layer)
    return removal_discrepancy(net, calib, {layer}, CriterionKind.DELTA_TASK_LOSS, reference=reference)


def eval_delta_score(net, calib, layer, score, reference=None) -> float:
    _check_prunable(net, layer)
    return removal_discrepancy(net, calib, {layer}, CriterionKind.DELTA_SCORE, score=score, reference=reference)


def eval_magnitude(net, layer) -> float:
    _check_prunable(net, layer)
    return float(sum(np.sum(np.abs(p.data)) for p in net.layer_params(layer)))


def _taylor_values(net, calib: Batch, layers: list[LayerId], mode: str) -> list[float]:
    if mode not in ("signed_sum", "abs_per_param"):
        raise ValueError(f"unknown taylor mode {mode!r}")
    params = {l: net.layer_params(l) for l in layers}
    all_params = net.parameters()
    acc = np.zeros(len(layers))
    for i in range(len(calib)):
        ad.zero_grads(all_params)
        pred, _ = net.forward(calib.z_t[i : i + 1], calib.y[i : i + 1], calib.t[i : i + 1])
        loss = ad.mean(ad.square(ad.sub(pred, calib.eps[i : i + 1])))
        loss.backward()
        for j, l in enumerate(layers):
            terms = [p.grad * p.data for p in params[l] if p.grad is not None]
            if mode == "signed_sum":
                acc[j] += abs(float(sum(np.sum(t) for t in terms)))
            else:
                acc[j] += float(sum(np.sum(np.abs(t)) for t in terms))
    ad.zero_grads(all_params)
    return list(acc / len(calib))


def eval_taylor(net, calib, layer, mode: str = "signed_sum") -> float:
    """Mean over tuples of |sum_w dL/dw * w| for the layer's parameters.

    ``mode="abs_per_param"`` sums |dL/dw * w| instead.
    """
    _check_prunable(net, layer)
    return _taylor_values(net, calib, [layer], mode)[0]


@dataclass(frozen=True)
class TableRow:
    layer: LayerId
    value: float
    weight: int


@dataclass
class LayerTable:
    kind: CriterionKind
    rows: list[TableRow]
    calib_seed: int | None = None
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def layers(self) -> list[LayerId]:
        return [r.layer for r in self.rows]

    @property
    def values(self) -> list[float]:
        return [r.value for r in self.rows]

    @property
    def weights(self) -> list[int]:
        return [r.weight for r in self.rows]

    def value_of(self, layer: LayerId) -> float:
        for r in self.rows:
            if r.layer == layer:
                return r.value
        raise LayerError(f"{layer} has no row in this table")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("stage,index,kind,value,weight\n")
        for r in self.rows:
            buf.write(f"{r.layer.stage.name},{r.layer.index},{r.layer.kind.value},{r.value:.17g},{r.weight}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, kind) -> "LayerTable":
        lines = text.splitlines()
        if not lines or lines[0] != "stage,index,kind,value,weight":
            raise ValueError("layer table CSV lacks the expected header")
        rows = []
        for line in lines[1:]:
            stage, index, lkind, value, weight = line.split(",")
            lid = LayerId(Stage.parse(stage), int(index), LayerKind(lkind))
            rows.append(TableRow(lid, float(value), int(weight)))
        return cls(CriterionKind(kind), rows)


def build_table(net, calib: Batch, kind, score=None, taylor_mode: str = "signed_sum") -> LayerTable:
    """One row per surviving prunable layer, in forward order."""
    kind = CriterionKind(kind)
    if (kind is CriterionKind.DELTA_SCORE) != (score is not None):
        if score is None:
            raise ValueError("delta_score criterion requires a score function")
        raise ValueError(f"a score function only applies to delta_score, not {kind.value}")
    layers = net.prunable
    if kind is CriterionKind.MAGNITUDE:
        values = [eval_magnitude(net, l) for l in layers]
    elif kind is CriterionKind.TAYLOR:
        values = _taylor_values(net, calib, layers, taylor_mode)
    else:
        ref = reference_outputs(net, calib)
        values = [removal_discrepancy(net, calib, {l}, kind, score, reference=ref) for l in layers]
    rows = [TableRow(l, float(v), net.param_count(l)) for l, v in zip(layers, values)]
    for r in rows:
        if not np.isfinite(r.value) or r.value < 0:
            raise ValueError(f"criterion {kind.value} produced invalid value {r.value} for {r.layer}")
    meta = {"taylor_mode": taylor_mode} if kind is CriterionKind.TAYLOR else {}
    return LayerTable(kind, rows, getattr(calib, "seed", None), net.fingerprint(), meta)
