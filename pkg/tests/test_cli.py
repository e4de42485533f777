import json
import subprocess
import sys

import numpy as np
import pytest

from layerprune import checkpoint
from layerprune.cli import ConfigError, main, parse_config

SMALL_NET = {"seed": 0, "num_dn_stages": 2, "widths": [4, 6], "tokens": 8, "dn_residual": 1, "dn_mixer": 1,
             "mid_residual": 1, "mid_mixer": 1, "up_residual": 1, "up_mixer": 1, "embed_dim": 4,
             "num_classes": 4, "num_timesteps": 50}


def base_config(outdir, **extra):
    cfg = {
        "run_name": "r",
        "outdir": str(outdir),
        "network": dict(SMALL_NET),
        "data": {"seed": 1},
        "calibration": {"seed": 2, "size": 16},
        "criterion": {"kind": "output_loss"},
        "prune": {"ratio": 0.5, "solver": "dp"},
    }
    cfg.update(extra)
    return cfg


def write(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def run(cmd, path, *flags):
    return main([cmd, "--config", path, *flags])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


class TestConfig:
    def test_unknown_keys(self, tmp_path):
        for cfg in (base_config(tmp_path, extra=1), {**base_config(tmp_path), "data": {"seed": 1, "noise": 2}}):
            with pytest.raises(ConfigError, match="unknown"):
                parse_config(cfg, "criteria")

    def test_seeds_mandatory(self, tmp_path):
        for section in ("network", "data", "calibration"):
            cfg = base_config(tmp_path)
            del cfg[section]["seed"]
            with pytest.raises(ConfigError, match="seed"):
                parse_config(cfg, "criteria")

    def test_delta_score_needs_score_seed(self, tmp_path, capsys):
        path = write(tmp_path / "c.json", base_config(tmp_path, criterion={"kind": "delta_score"}))
        assert run("criteria", path) == 2
        assert "score_seed" in capsys.readouterr().err

    def test_bad_values(self, tmp_path):
        bad = [
            {"prune": {"ratio": 1.5}},
            {"prune": {"ratio": 0.5, "solver": "annealing"}},
            {"criterion": {"kind": "entropy"}},
            {"calibration": {"seed": 1, "size": 0}},
            {"network": {**SMALL_NET, "tokens": 7}},
            {"run_name": "a/b"},
            {"network": {**SMALL_NET, "seed": "zero"}},
        ]
        for patch in bad:
            with pytest.raises(ConfigError):
                parse_config({**base_config(tmp_path), **patch}, "prune")

    def test_missing_section(self, tmp_path):
        cfg = base_config(tmp_path)
        del cfg["prune"]
        with pytest.raises(ConfigError, match="prune"):
            parse_config(cfg, "prune")

    def test_unreadable(self, tmp_path):
        assert run("criteria", str(tmp_path / "missing.json")) == 2
        (tmp_path / "bad.json").write_text("{not json")
        assert run("criteria", str(tmp_path / "bad.json")) == 2


class TestCriteria:
    def test_table_and_echo(self, tmp_path):
        path = write(tmp_path / "c.json", base_config(tmp_path))
        assert run("criteria", path) == 0
        out = tmp_path / "criteria" / "r"
        lines = (out / "table.csv").read_text().splitlines()
        assert lines[0] == "stage,index,kind,value,weight" and len(lines) == 1 + 10
        echo = json.loads((out / "config.json").read_text())
        assert echo["network"]["seed"] == 0 and echo["criterion"]["taylor_mode"] == "signed_sum"

    def test_rerun_identical(self, tmp_path):
        path = write(tmp_path / "c.json", base_config(tmp_path, criterion={"kind": "delta_score", "score_seed": 3}))
        assert run("criteria", path) == 0
        first = files(tmp_path / "criteria" / "r")
        assert run("criteria", path) == 0
        assert files(tmp_path / "criteria" / "r") == first

    def test_seed_override(self, tmp_path):
        path = write(tmp_path / "c.json", base_config(tmp_path))
        assert run("criteria", path, "--seed-override", "9", "--run-name", "s9") == 0
        echo = json.loads((tmp_path / "criteria" / "s9" / "config.json").read_text())
        assert echo["network"]["seed"] == 9
        assert run("criteria", path) == 0
        assert (tmp_path / "criteria" / "s9" / "table.csv").read_bytes() != \
               (tmp_path / "criteria" / "r" / "table.csv").read_bytes()


class TestPrune:
    def test_artifacts(self, tmp_path, capsys):
        path = write(tmp_path / "c.json", base_config(tmp_path))
        assert run("prune", path) == 0
        out = tmp_path / "prune" / "r"
        assert {"config.json", "table.csv", "plan.json", "report.csv", "teacher.ckpt", "pruned.ckpt"} <= set(files(out))
        net = checkpoint.load(out / "pruned.ckpt")
        eps, _ = net.forward(np.zeros((8, 4)), 0, 0)
        assert eps.shape == (8, 4)
        plan = json.loads((out / "plan.json").read_text())
        assert len(net.removed) == len(plan["removal"]) > 0
        stdout = capsys.readouterr().out
        assert "P-Ratio" in stdout and "Up Total" in stdout

    def test_ratio_zero(self, tmp_path):
        path = write(tmp_path / "c.json", base_config(tmp_path, prune={"ratio": 0.0}))
        assert run("prune", path) == 0
        assert json.loads((tmp_path / "prune" / "r" / "plan.json").read_text())["removal"] == []

    def test_infeasible_ratio(self, tmp_path, capsys):
        path = write(tmp_path / "c.json", base_config(tmp_path))
        assert run("prune", path, "--ratio", "0.99") == 1
        assert "maximum feasible ratio" in capsys.readouterr().err
        assert not (tmp_path / "prune" / "r").exists()

    def test_exhaustive_refused_on_large_net(self, tmp_path, capsys):
        big = {"seed": 0, "dn_residual": 3, "up_residual": 4}
        path = write(tmp_path / "c.json", base_config(tmp_path, network=big))
        assert run("prune", path, "--solver", "exhaustive") == 2
        assert "24" in capsys.readouterr().err

    def test_teacher_fit(self, tmp_path):
        cfg = base_config(tmp_path, teacher_fit={"iterations": 5, "seed": 3})
        assert run("prune", write(tmp_path / "c.json", cfg)) == 0
        del cfg["teacher_fit"]["seed"]
        assert run("prune", write(tmp_path / "d.json", cfg)) == 2


class TestAdditivity:
    def test_default_layout(self, tmp_path):
        cfg = base_config(tmp_path, additivity={"seed": 0, "score_seed": 1}, calibration={"seed": 2, "size": 4},
                          network={"seed": 0})
        path = write(tmp_path / "c.json", cfg)
        assert run("additivity", path) == 0
        out = tmp_path / "additivity" / "r"
        scatter = (out / "scatter.csv").read_text().splitlines()
        summary = (out / "summary.csv").read_text().splitlines()
        assert len(scatter) == 1 + 3 * 9 * 50
        assert len(summary) == 1 + 3
        first = files(out)
        assert run("additivity", path) == 0
        assert files(out) == first

    def test_unattainable_ratio_marked(self, tmp_path):
        cfg = base_config(tmp_path, additivity={"seed": 0, "score_seed": 1, "ratios": [0.5, 0.9], "per_ratio": 3},
                          calibration={"seed": 2, "size": 4})
        assert run("additivity", write(tmp_path / "c.json", cfg)) == 0
        scatter = (tmp_path / "additivity" / "r" / "scatter.csv").read_text().splitlines()
        assert sum(l.endswith(",nan,nan") for l in scatter) == 3

    def test_needs_seeds(self, tmp_path):
        path = write(tmp_path / "c.json", base_config(tmp_path, additivity={"score_seed": 1}))
        assert run("additivity", path) == 2


class TestDistillAndReport:
    @pytest.fixture
    def pruned(self, tmp_path):
        assert run("prune", write(tmp_path / "p.json", base_config(tmp_path))) == 0
        return tmp_path / "prune" / "r"

    def distill_cfg(self, tmp_path, pruned, **kw):
        return base_config(tmp_path, distill={"seed": 0, "iterations": 4, "batch_size": 4,
                                              "teacher": str(pruned / "teacher.ckpt"),
                                              "student": str(pruned / "pruned.ckpt"), **kw})

    def test_distill(self, tmp_path, pruned):
        before = {p: p.read_bytes() for p in pruned.iterdir()}
        path = write(tmp_path / "d.json", self.distill_cfg(tmp_path, pruned))
        assert run("distill", path) == 0
        out = tmp_path / "distill" / "r"
        assert {"config.json", "train_log.csv", "student.ckpt", "heldout.json"} <= set(files(out))
        assert {p: p.read_bytes() for p in pruned.iterdir()} == before
        first = files(out)
        assert run("distill", path) == 0
        assert files(out) == first

    def test_single_iteration(self, tmp_path, pruned):
        path = write(tmp_path / "d.json", self.distill_cfg(tmp_path, pruned))
        assert run("distill", path, "--iterations", "1") == 0
        rows = (tmp_path / "distill" / "r" / "train_log.csv").read_text().splitlines()[1:]
        assert {r.split(",")[0] for r in rows} == {"0"}

    def test_normalized_flag(self, tmp_path, pruned):
        path = write(tmp_path / "d.json", self.distill_cfg(tmp_path, pruned))
        logs = {}
        for flag in ("true", "false"):
            assert run("distill", path, "--normalized", flag, "--run-name", flag) == 0
            logs[flag] = [r.split(",") for r in (tmp_path / "distill" / flag / "train_log.csv").read_text().splitlines()[1:]]
        it0 = [i for i, r in enumerate(logs["true"]) if r[0] == "0"]
        for i in it0:
            assert logs["true"][i][:7] == logs["false"][i][:7]
        later = [i for i, r in enumerate(logs["true"]) if r[0] == "1"]
        assert any(logs["true"][i] != logs["false"][i] for i in later)

    def test_missing_checkpoint(self, tmp_path, capsys):
        cfg = base_config(tmp_path, distill={"seed": 0, "teacher": "nope.ckpt", "student": "nope.ckpt"})
        assert run("distill", write(tmp_path / "d.json", cfg)) == 1
        assert "not found" in capsys.readouterr().err

    def test_report(self, tmp_path, pruned, capsys):
        capsys.readouterr()
        cfg = {"run_name": "r", "outdir": str(tmp_path), "report": {"plan": str(pruned / "plan.json")}}
        assert run("report", write(tmp_path / "r.json", cfg)) == 0
        out = tmp_path / "report" / "r"
        assert (out / "report.csv").read_bytes() == (pruned / "report.csv").read_bytes()
        assert "Dn Total" in capsys.readouterr().out
        cfg["report"]["plan"] = str(tmp_path / "nope.json")
        assert run("report", write(tmp_path / "r.json", cfg)) == 1


def test_module_entry_point(tmp_path):
    path = write(tmp_path / "c.json", base_config(tmp_path))
    proc = subprocess.run([sys.executable, "-m", "layerprune", "criteria", "--config", path],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "layerprune", "prune"], capture_output=True, text=True)
    assert proc.returncode == 2
