"""One-shot layer pruning: criterion table -> knapsack -> removal set."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

from .criteria import CriterionKind, LayerTable, build_table
from .knapsack import Instance, solve
from .toynet import LayerId, LayerKind, Stage

__all__ = [
    "RatioError",
    "StageRow",
    "PruningPlan",
    "compute_capacity",
    "plan_from_table",
    "prune",
    "report",
    "report_text",
]


class RatioError(ValueError):
    """Requested pruning ratio cannot be met by removing prunable layers."""


def compute_capacity(net, ratio: float) -> int:
    """Parameters to remove: ceil(ratio * total parameters)."""
    if not 0.0 <= ratio <= 1.0:
        raise RatioError(f"ratio must lie in [0, 1], got {ratio}")
    total = net.total_params()
    # round first so 0.3 * 10000 is 3000, not 3001
    cap = math.ceil(round(ratio * total, 6))
    prunable = net.prunable_params()
    if cap > prunable:
        raise RatioError(
            f"ratio {ratio} needs {cap} parameters but only {prunable} are prunable; "
            f"maximum feasible ratio is {prunable / total:.6f}"
        )
    return cap


@dataclass(frozen=True)
class StageRow:
    stage: str
    r_ori: int
    r_prn: int
    t_ori: int
    t_prn: int
    params_ori: int
    params_prn: int

    @property
    def p_ratio(self) -> float:
        return self.params_prn / self.params_ori if self.params_ori else 0.0


def _stage_rows(net, removal) -> list[StageRow]:
    rows = []
    for stage in net.stages:
        layers = [l for l in net.prunable if l.stage == stage]
        stats = {"r_ori": 0, "r_prn": 0, "t_ori": 0, "t_prn": 0, "params_ori": 0, "params_prn": 0}
        for l in layers:
            tag = "r" if l.kind is LayerKind.RESIDUAL else "t"
            stats[f"{tag}_ori"] += 1
            stats["params_ori"] += net.param_count(l)
            if l in removal:
                stats[f"{tag}_prn"] += 1
                stats["params_prn"] += net.param_count(l)
        rows.append(StageRow(stage.name, **stats))
    return rows


@dataclass
class PruningPlan:
    removal: tuple[LayerId, ...]
    criterion: CriterionKind
    solver: str
    ratio: float
    capacity: int
    achieved: int
    total_params: int
    criterion_total: float
    stages: list[StageRow] = field(default_factory=list)

    def totals(self) -> list[StageRow]:
        """Dn-total and Up-total aggregation rows."""
        out = []
        for prefix, label in (("Dn", "Dn Total"), ("Up", "Up Total")):
            sel = [r for r in self.stages if r.stage.startswith(prefix)]
            out.append(StageRow(label, *(sum(getattr(r, f) for r in sel)
                                         for f in ("r_ori", "r_prn", "t_ori", "t_prn", "params_ori", "params_prn"))))
        return out

    def to_dict(self) -> dict:
        return {
            "removal": [{"stage": l.stage.name, "index": l.index, "kind": l.kind.value} for l in self.removal],
            "criterion": self.criterion.value,
            "solver": self.solver,
            "ratio": self.ratio,
            "capacity": self.capacity,
            "achieved": self.achieved,
            "total_params": self.total_params,
            "criterion_total": self.criterion_total,
            "stages": [
                {"stage": r.stage, "R_ori": r.r_ori, "R_prn": r.r_prn, "T_ori": r.t_ori, "T_prn": r.t_prn,
                 "params_ori": r.params_ori, "params_prn": r.params_prn}
                for r in self.stages
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "PruningPlan":
        removal = tuple(LayerId(Stage.parse(r["stage"]), int(r["index"]), LayerKind(r["kind"])) for r in d["removal"])
        stages = [StageRow(s["stage"], s["R_ori"], s["R_prn"], s["T_ori"], s["T_prn"], s["params_ori"], s["params_prn"])
                  for s in d["stages"]]
        return cls(removal, CriterionKind(d["criterion"]), d["solver"], float(d["ratio"]), int(d["capacity"]),
                   int(d["achieved"]), int(d["total_params"]), float(d["criterion_total"]), stages)


def plan_from_table(net, table: LayerTable, ratio: float, solver: str = "dp", granularity: int | None = 1) -> PruningPlan:
    capacity = compute_capacity(net, ratio)
    inst = Instance(table.values, table.weights, capacity)
    kwargs = {"granularity": granularity} if solver == "dp" else {}
    sol = solve(inst, solver, **kwargs)
    removal = tuple(table.layers[i] for i in sol.chosen)
    return PruningPlan(
        removal=removal,
        criterion=table.kind,
        solver=sol.solver,
        ratio=ratio,
        capacity=capacity,
        achieved=sum(net.param_count(l) for l in removal),
        total_params=net.total_params(),
        criterion_total=sol.total_value,
        stages=_stage_rows(net, set(removal)),
    )


def prune(net, calib, kind=CriterionKind.OUTPUT_LOSS, ratio: float = 0.5, solver: str = "dp", score=None,
          granularity: int | None = 1, table: LayerTable | None = None):
    """Returns ``(plan, pruned_network)``; ``net`` itself is left untouched."""
    if table is None:
        table = build_table(net, calib, kind, score)
    plan = plan_from_table(net, table, ratio, solver, granularity)
    return plan, net.remove_layers(plan.removal)


_HEADER = ("stage", "R_ori", "R_prn", "T_ori", "T_prn", "p_ratio")


def report(plan: PruningPlan) -> str:
    """CSV in the per-stage pruned-architecture layout, plus Dn/Up totals."""
    buf = io.StringIO()
    buf.write(",".join(_HEADER) + "\n")
    for r in plan.stages + plan.totals():
        buf.write(f"{r.stage},{r.r_ori},{r.r_prn},{r.t_ori},{r.t_prn},{r.p_ratio:.6f}\n")
    return buf.getvalue()


def report_text(plan: PruningPlan) -> str:
    lines = [
        f"criterion={plan.criterion.value} solver={plan.solver} ratio={plan.ratio} "
        f"capacity={plan.capacity} achieved={plan.achieved}/{plan.total_params}",
        f"{'Stage':<10}{'#R_ori':>8}{'#R_prn':>8}{'#T_ori':>8}{'#T_prn':>8}{'P-Ratio':>9}",
    ]
    rows = plan.stages + plan.totals()
    for i, r in enumerate(rows):
        if i == len(plan.stages):
            lines.append("-" * 51)
        lines.append(f"{r.stage:<10}{r.r_ori:>8}{r.r_prn:>8}{r.t_ori:>8}{r.t_prn:>8}{r.p_ratio:>8.0%} ")
    return "\n".join(l.rstrip() for l in lines) + "\n"
