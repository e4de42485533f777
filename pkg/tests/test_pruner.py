import itertools
import json

import numpy as np
import pytest

from conftest import calib_for, small_spec
from layerprune.criteria import build_table
from layerprune.pruner import PruningPlan, RatioError, compute_capacity, plan_from_table, prune, report, report_text
from layerprune.toynet import NetworkSpec, Stage, build


class CountNet:
    def __init__(self, total, prunable):
        self._t, self._p = total, prunable

    def total_params(self):
        return self._t

    def prunable_params(self):
        return self._p


@pytest.fixture(scope="module")
def small():
    net = build(small_spec(1))
    return net, calib_for(net.spec, n=16)


def fwd(net, b):
    return net.forward(b.z_t, b.y, b.t)[0].data


class TestCapacity:
    def test_values(self):
        assert compute_capacity(CountNet(10_000, 9_000), 0.0) == 0
        assert compute_capacity(CountNet(10_000, 9_000), 0.5) == 5_000
        assert compute_capacity(CountNet(10_000, 9_000), 0.3) == 3_000
        assert compute_capacity(CountNet(10, 9), 0.55) == 6

    def test_above_prunable_fraction(self):
        with pytest.raises(RatioError, match="maximum feasible ratio is 0.900000"):
            compute_capacity(CountNet(10_000, 9_000), 0.95)
        with pytest.raises(RatioError):
            compute_capacity(CountNet(10, 9), -0.1)


class TestPrune:
    def test_ratio_zero(self, small):
        net, calib = small
        plan, pruned = prune(net, calib, "output_loss", 0.0)
        assert plan.removal == () and plan.achieved == 0
        np.testing.assert_array_equal(fwd(pruned, calib), fwd(net, calib))

    @pytest.mark.parametrize("ratio", [0.2, 0.5, 0.7])
    def test_dp_matches_exhaustive(self, small, ratio):
        net, calib = small
        table = build_table(net, calib, "output_loss")
        dp = plan_from_table(net, table, ratio, "dp")
        ex = plan_from_table(net, table, ratio, "exhaustive")
        gr = plan_from_table(net, table, ratio, "greedy")
        assert dp.criterion_total == pytest.approx(ex.criterion_total, abs=1e-12)
        assert dp.criterion_total <= gr.criterion_total
        for plan in (dp, ex, gr):
            assert plan.achieved >= plan.capacity

    def test_surrogate_optimal(self, small):
        net, calib = small
        table = build_table(net, calib, "magnitude")
        plan = plan_from_table(net, table, 0.4, "exhaustive")
        best = np.inf
        for mask in itertools.product([0, 1], repeat=len(table.rows)):
            w = sum(wi for wi, m in zip(table.weights, mask) if m)
            if w >= plan.capacity:
                best = min(best, sum(v for v, m in zip(table.values, mask) if m))
        assert plan.criterion_total == pytest.approx(best, rel=1e-12)

    def test_network_agrees_with_plan(self, small):
        net, calib = small
        plan, pruned = prune(net, calib, "output_loss", 0.5)
        np.testing.assert_array_equal(fwd(pruned, calib), fwd(net.remove_layers(plan.removal), calib))
        assert pruned.removed == set(plan.removal)
        assert net.removed == frozenset()

    def test_infeasible_ratio(self, small):
        net, calib = small
        with pytest.raises(RatioError):
            prune(net, calib, "magnitude", 0.99)

    def test_json_round_trip(self, small):
        net, calib = small
        plan, _ = prune(net, calib, "output_loss", 0.5)
        back = PruningPlan.from_dict(json.loads(plan.to_json()))
        assert back == plan


class TestReport:
    def test_empty_plan(self, small):
        net, calib = small
        plan, _ = prune(net, calib, "magnitude", 0.0)
        rows = [l.split(",") for l in report(plan).splitlines()[1:]]
        assert all(r[2] == "0" and r[4] == "0" and float(r[5]) == 0.0 for r in rows)

    def test_all_mid_removed(self, default_net, default_calib):
        table = build_table(default_net, default_calib, "magnitude")
        mid = [l for l in default_net.prunable if l.stage == Stage.mid()]
        plan = plan_from_table(default_net, table, 0.0)
        plan.removal = tuple(mid)
        from layerprune.pruner import _stage_rows
        plan.stages = _stage_rows(default_net, set(mid))
        line = next(l for l in report(plan).splitlines() if l.startswith("Mid,"))
        assert line.endswith(",1.000000")
        assert "100%" in next(l for l in report_text(plan).splitlines() if l.startswith("Mid"))

    def test_totals(self, default_net, default_calib):
        plan, _ = prune(default_net, default_calib, "output_loss", 0.5)
        dn, up = plan.totals()
        for total, prefix in ((dn, "Dn"), (up, "Up")):
            rows = [r for r in plan.stages if r.stage.startswith(prefix)]
            assert total.r_prn == sum(r.r_prn for r in rows)
            assert total.t_ori == sum(r.t_ori for r in rows)
            assert total.params_prn == sum(r.params_prn for r in rows)
        assert sum(r.params_prn for r in plan.stages) == plan.achieved
        assert sum(r.r_prn + r.t_prn for r in plan.stages) == len(plan.removal)

    def test_layout(self, default_net, default_calib):
        plan, _ = prune(default_net, default_calib, "output_loss", 0.5)
        lines = report(plan).splitlines()
        assert lines[0] == "stage,R_ori,R_prn,T_ori,T_prn,p_ratio"
        assert [l.split(",")[0] for l in lines[1:]] == ["Dn1", "Dn2", "Mid", "Up1", "Up2", "Dn Total", "Up Total"]
        text = report_text(plan)
        assert "#R_ori" in text and "P-Ratio" in text
