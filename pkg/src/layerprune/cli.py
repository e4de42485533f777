"""Command-line pipeline: criteria, prune, additivity, distill, report.

Every command reads one JSON config, validates all of it before doing any
work, and writes its artifacts plus a ``config.json`` echo of the effective
configuration to ``<outdir>/<command>/<run_name>/``.  All seeds are
explicit, so reruns with the same config produce byte-identical files.

Example config::

    {
      "run_name": "demo",
      "outdir": "runs",
      "network": {"seed": 0},
      "data": {"seed": 100},
      "calibration": {"seed": 7, "size": 256},
      "criterion": {"kind": "output_loss"},
      "prune": {"ratio": 0.5, "solver": "dp"}
    }
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import additivity, checkpoint, criteria, distill, pruner
from .criteria import CriterionKind, ProxyScore
from .diffusion import GaussianMixtureData, NoiseSchedule, make_calibration
from .knapsack import MAX_EXHAUSTIVE_ITEMS, InfeasibleError
from .toynet import LayerError, NetworkSpec, build

log = logging.getLogger("layerprune")

COMMANDS = ("criteria", "prune", "additivity", "distill", "report")
DEFAULT_RATIOS = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]


class ConfigError(ValueError):
    """The run configuration is malformed or incomplete."""


# ------------------------------------------------------------------ config

_SECTIONS = {
    "network": {f.name for f in dataclasses.fields(NetworkSpec)},
    "data": {"seed", "mean_scale"},
    "calibration": {"seed", "size"},
    "teacher_fit": {"iterations", "seed", "learning_rate", "batch_size"},
    "criterion": {"kind", "score_seed", "taylor_mode"},
    "prune": {"ratio", "solver", "granularity"},
    "additivity": {"ratios", "per_ratio", "seed", "tol", "score_seed"},
    "distill": {f.name for f in dataclasses.fields(distill.DistillConfig)}
    | {"teacher", "student", "heldout_seed", "heldout_size"},
    "report": {"plan"},
}
_TOP = {"run_name", "outdir"} | set(_SECTIONS)

_REQUIRED = {
    "criteria": ("network", "data", "calibration", "criterion"),
    "prune": ("network", "data", "calibration", "criterion", "prune"),
    "additivity": ("network", "data", "calibration", "additivity"),
    "distill": ("data", "distill"),
    "report": ("report",),
}


def _need(section: dict, key: str, where: str):
    if key not in section or section[key] is None:
        raise ConfigError(f"{where}.{key} is required")
    return section[key]


def _int(value, where: str, lo: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{where} must be an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{where} must be >= {lo}, got {value}")
    return value


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where} must be a number, got {value!r}")
    return float(value)


@dataclass
class RunConfig:
    command: str
    raw: dict

    @property
    def run_name(self) -> str:
        return self.raw["run_name"]

    @property
    def run_dir(self) -> Path:
        return Path(self.raw["outdir"]) / self.command / self.run_name

    def section(self, name: str) -> dict:
        return self.raw.get(name) or {}

    def spec(self) -> NetworkSpec:
        try:
            return NetworkSpec.from_dict(self.section("network"))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"network: {e}") from None

    def data(self) -> GaussianMixtureData:
        d = self.section("data")
        spec = self.spec() if "network" in self.raw else None
        shape = (spec.tokens, spec.in_channels) if spec else None
        return GaussianMixtureData(shape or (16, 8), num_classes=spec.num_classes if spec else 8,
                                   seed=d["seed"], mean_scale=d.get("mean_scale", 3.0))

    def schedule(self) -> NoiseSchedule:
        spec = self.spec() if "network" in self.raw else NetworkSpec()
        return NoiseSchedule.linear(spec.num_timesteps)

    def echo(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"


def parse_config(doc: dict, command: str) -> RunConfig:
    """Validate ``doc`` for ``command``; raises :class:`ConfigError`."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = copy.deepcopy(doc)
    unknown = set(doc) - _TOP
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for name, allowed in _SECTIONS.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ConfigError(f"{name} must be an object")
            bad = set(doc[name]) - allowed
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
    for key in ("run_name", "outdir"):
        value = _need(doc, key, "config")
        if not isinstance(value, str) or not value:
            raise ConfigError(f"{key} must be a non-empty string")
    if os.sep in doc["run_name"] or doc["run_name"] in (".", ".."):
        raise ConfigError("run_name must be a plain directory name")
    for name in _REQUIRED[command]:
        if name not in doc:
            raise ConfigError(f"section {name!r} is required for {command}")

    if "network" in doc:
        _int(_need(doc["network"], "seed", "network"), "network.seed")
    if "data" in doc:
        _int(_need(doc["data"], "seed", "data"), "data.seed")
        if "mean_scale" in doc["data"]:
            _num(doc["data"]["mean_scale"], "data.mean_scale")
    if "calibration" in doc:
        c = doc["calibration"]
        _int(_need(c, "seed", "calibration"), "calibration.seed")
        c.setdefault("size", 256)
        _int(c["size"], "calibration.size", 1)
    if "teacher_fit" in doc:
        f = doc["teacher_fit"]
        f.setdefault("iterations", 0)
        _int(f["iterations"], "teacher_fit.iterations", 0)
        if f["iterations"] > 0:
            _int(_need(f, "seed", "teacher_fit"), "teacher_fit.seed")
        f.setdefault("learning_rate", 1e-3)
        f.setdefault("batch_size", 32)
        _num(f["learning_rate"], "teacher_fit.learning_rate")
        _int(f["batch_size"], "teacher_fit.batch_size", 1)
    if "criterion" in doc:
        c = doc["criterion"]
        try:
            kind = CriterionKind(_need(c, "kind", "criterion"))
        except ValueError:
            raise ConfigError(f"criterion.kind must be one of {[k.value for k in CriterionKind]}") from None
        if kind is CriterionKind.DELTA_SCORE:
            _int(_need(c, "score_seed", "criterion"), "criterion.score_seed")
        elif c.get("score_seed") is not None:
            raise ConfigError(f"criterion.score_seed only applies to {CriterionKind.DELTA_SCORE.value}")
        c.setdefault("taylor_mode", "signed_sum")
        if c["taylor_mode"] not in ("signed_sum", "abs_per_param"):
            raise ConfigError("criterion.taylor_mode must be signed_sum or abs_per_param")
    if "prune" in doc:
        p = doc["prune"]
        ratio = _num(_need(p, "ratio", "prune"), "prune.ratio")
        if not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"prune.ratio must lie in [0, 1], got {ratio}")
        p.setdefault("solver", "dp")
        if p["solver"] not in ("dp", "greedy", "exhaustive"):
            raise ConfigError("prune.solver must be dp, greedy or exhaustive")
        p.setdefault("granularity", 1)
        if p["granularity"] is not None:
            _int(p["granularity"], "prune.granularity", 1)
    if "additivity" in doc:
        a = doc["additivity"]
        _int(_need(a, "seed", "additivity"), "additivity.seed")
        _int(_need(a, "score_seed", "additivity"), "additivity.score_seed")
        a.setdefault("ratios", list(DEFAULT_RATIOS))
        if not isinstance(a["ratios"], list) or not a["ratios"]:
            raise ConfigError("additivity.ratios must be a non-empty list")
        for r in a["ratios"]:
            if not 0.0 < _num(r, "additivity.ratios[]") < 1.0:
                raise ConfigError(f"additivity ratio {r} must lie in (0, 1)")
        a.setdefault("per_ratio", 50)
        _int(a["per_ratio"], "additivity.per_ratio", 1)
        a.setdefault("tol", 0.02)
        _num(a["tol"], "additivity.tol")
    if "distill" in doc:
        d = doc["distill"]
        _int(_need(d, "seed", "distill"), "distill.seed")
        for key in ("teacher", "student"):
            if not isinstance(_need(d, key, "distill"), str):
                raise ConfigError(f"distill.{key} must be a path string")
        d.setdefault("heldout_seed", d["seed"] + 1)
        d.setdefault("heldout_size", 256)
        _int(d["heldout_seed"], "distill.heldout_seed")
        _int(d["heldout_size"], "distill.heldout_size", 1)
        try:
            cfg = distill.DistillConfig(**{k: v for k, v in d.items()
                                           if k not in ("teacher", "student", "heldout_seed", "heldout_size")})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"distill: {e}") from None
        d.update(cfg.to_dict())
    if "report" in doc:
        if not isinstance(_need(doc["report"], "plan", "report"), str):
            raise ConfigError("report.plan must be a path string")

    cfg = RunConfig(command, doc)
    if "network" in doc:
        cfg.spec()
    return cfg


def load_config(path, command: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for dotted, value in (overrides or {}).items():
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {p} is not an object")
        node[leaf] = value
    return parse_config(doc, command)


# ---------------------------------------------------------------- helpers


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _start(cfg: RunConfig) -> Path:
    out = cfg.run_dir
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", cfg.echo())
    return out


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _teacher(cfg: RunConfig):
    net = build(cfg.spec())
    fit = cfg.section("teacher_fit")
    if fit.get("iterations", 0) > 0:
        log.info("fitting teacher for %d iterations", fit["iterations"])
        distill.pretrain(net, cfg.data(), cfg.schedule(), fit["iterations"], fit["learning_rate"],
                         fit["batch_size"], fit["seed"])
    return net


def _calibration(cfg: RunConfig):
    c = cfg.section("calibration")
    return make_calibration(cfg.data(), cfg.schedule(), c["seed"], c["size"])


def _score(cfg: RunConfig, seed):
    if seed is None:
        return None
    spec = cfg.spec()
    return ProxyScore(seed, (spec.tokens, spec.in_channels), spec.num_classes)


def _table(cfg: RunConfig, net, calib):
    c = cfg.section("criterion")
    kind = CriterionKind(c["kind"])
    return criteria.build_table(net, calib, kind, _score(cfg, c.get("score_seed")), c["taylor_mode"])


# --------------------------------------------------------------- commands


def cmd_criteria(cfg: RunConfig) -> Path:
    net = _teacher(cfg)
    calib = _calibration(cfg)
    table = _table(cfg, net, calib)
    out = _start(cfg)
    _write(out / "table.csv", table.to_csv())
    return out


def cmd_prune(cfg: RunConfig) -> Path:
    p = cfg.section("prune")
    net = _teacher(cfg)
    if p["solver"] == "exhaustive" and len(net.prunable) > MAX_EXHAUSTIVE_ITEMS:
        raise ConfigError(f"solver=exhaustive is limited to {MAX_EXHAUSTIVE_ITEMS} prunable layers; "
                          f"this network has {len(net.prunable)}")
    pruner.compute_capacity(net, p["ratio"])
    calib = _calibration(cfg)
    table = _table(cfg, net, calib)
    plan = pruner.plan_from_table(net, table, p["ratio"], p["solver"], p["granularity"])
    student = net.remove_layers(plan.removal)
    out = _start(cfg)
    _write(out / "table.csv", table.to_csv())
    _write(out / "plan.json", plan.to_json())
    _write(out / "report.csv", pruner.report(plan))
    checkpoint.save(net, out / "teacher.ckpt")
    checkpoint.save(student, out / "pruned.ckpt")
    sys.stdout.write(pruner.report_text(plan))
    return out


def cmd_additivity(cfg: RunConfig) -> Path:
    a = cfg.section("additivity")
    net = _teacher(cfg)
    calib = _calibration(cfg)
    score = _score(cfg, a["score_seed"])
    summaries = []
    for kind in criteria.REMOVAL_CRITERIA:
        log.info("additivity sweep for %s", kind.value)
        summaries.append(additivity.sweep(net, calib, kind, a["ratios"], a["per_ratio"], a["seed"],
                                          score if kind is CriterionKind.DELTA_SCORE else None, tol=a["tol"]))
    out = _start(cfg)
    _write(out / "scatter.csv", additivity.scatter_csv(summaries))
    _write(out / "summary.csv", additivity.summary_csv(summaries))
    return out


def cmd_distill(cfg: RunConfig) -> Path:
    d = cfg.section("distill")
    for key in ("teacher", "student"):
        if not Path(d[key]).is_file():
            raise FileNotFoundError(f"{key} checkpoint not found: {d[key]}")
    teacher = checkpoint.load(d["teacher"])
    student = checkpoint.load(d["student"])
    if student.spec != teacher.spec:
        raise ConfigError("teacher and student checkpoints come from different network specs")
    config = distill.DistillConfig(**{f.name: d[f.name] for f in dataclasses.fields(distill.DistillConfig)})
    data = GaussianMixtureData((teacher.spec.tokens, teacher.spec.in_channels), teacher.spec.num_classes,
                               cfg.section("data")["seed"], cfg.section("data").get("mean_scale", 3.0))
    sched = NoiseSchedule.linear(teacher.spec.num_timesteps)
    student, tlog = distill.train(teacher, student, data, sched, config)
    held = make_calibration(data, sched, d["heldout_seed"], d["heldout_size"])
    out = _start(cfg)
    _write(out / "train_log.csv", tlog.to_csv())
    _write(out / "heldout.json", _json(distill.evaluate(teacher, student, held)))
    checkpoint.save(student, out / "student.ckpt")
    return out


def cmd_report(cfg: RunConfig) -> Path:
    path = Path(cfg.section("report")["plan"])
    if not path.is_file():
        raise FileNotFoundError(f"plan not found: {path}")
    try:
        plan = pruner.PruningPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"cannot read plan {path}: {e}") from None
    out = _start(cfg)
    _write(out / "report.csv", pruner.report(plan))
    text = pruner.report_text(plan)
    _write(out / "report.txt", text)
    sys.stdout.write(text)
    return out


_HANDLERS = {
    "criteria": cmd_criteria,
    "prune": cmd_prune,
    "additivity": cmd_additivity,
    "distill": cmd_distill,
    "report": cmd_report,
}


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerprune", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "criteria": "compute the per-layer criterion table",
        "prune": "one-shot pruning: criterion table, knapsack, pruned checkpoint",
        "additivity": "approximated vs. real criterion sweep for the removal criteria",
        "distill": "retrain a pruned checkpoint against its teacher",
        "report": "render a saved plan as a per-stage table",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed-override", type=int, help="replace network.seed")
        p.add_argument("--run-name", help="replace run_name")
        p.add_argument("--outdir", help="replace outdir")
        if name in ("criteria", "prune"):
            p.add_argument("--criterion", choices=[k.value for k in CriterionKind], help="replace criterion.kind")
        if name == "prune":
            p.add_argument("--ratio", type=float, help="replace prune.ratio")
            p.add_argument("--solver", choices=["dp", "greedy", "exhaustive"], help="replace prune.solver")
        if name == "distill":
            p.add_argument("--iterations", type=int, help="replace distill.iterations")
            p.add_argument("--normalized", choices=["true", "false"], help="replace distill.normalized")
    return parser


def _overrides(args) -> dict:
    out = {}
    if args.seed_override is not None:
        out["network.seed"] = args.seed_override
    if args.run_name is not None:
        out["run_name"] = args.run_name
    if args.outdir is not None:
        out["outdir"] = args.outdir
    if getattr(args, "criterion", None) is not None:
        out["criterion.kind"] = args.criterion
    if getattr(args, "ratio", None) is not None:
        out["prune.ratio"] = args.ratio
    if getattr(args, "solver", None) is not None:
        out["prune.solver"] = args.solver
    if getattr(args, "iterations", None) is not None:
        out["distill.iterations"] = args.iterations
    if getattr(args, "normalized", None) is not None:
        out["distill.normalized"] = args.normalized == "true"
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command, _overrides(args))
        out = _HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (pruner.RatioError, InfeasibleError, LayerError, checkpoint.CheckpointError,
            distill.TrainingError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    log.info("wrote %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
