"""Distillation-based retraining of a pruned student.

Objective per batch::

    task + lambda_out * outkd + lambda_feat * sum_{i in V} alpha_i * feat_i

``feat_i`` is the mean squared difference of the stage-``i`` feature maps.
With ``normalized=True`` each stage is re-weighted by
``alpha_i = mean_j(norm_j) / norm_i`` where ``norm_i`` is the teacher's
per-sample feature L2 norm averaged over the batch; otherwise
``alpha_i = 1``.  The weights are constants: no gradient flows through
them or through the teacher.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import Batch, GaussianMixtureData, NoiseSchedule, make_batch

log = logging.getLogger(__name__)

__all__ = [
    "DistillConfig",
    "TrainingError",
    "LossTerms",
    "TrainLog",
    "stage_set",
    "feature_alphas",
    "out_kd_loss",
    "feat_kd_loss",
    "normalized_feat_kd_loss",
    "total_loss",
    "evaluate",
    "Adam",
    "train",
    "pretrain",
]

NORM_FLOOR = 1e-12


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int, log_: "TrainLog | None" = None):
        super().__init__(message)
        self.iteration = iteration
        self.log = log_


@dataclass(frozen=True)
class DistillConfig:
    lambda_outkd: float = 1.0
    lambda_featkd: float = 1.0
    normalized: bool = True
    learning_rate: float = 1e-3
    iterations: int = 500
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lambda_outkd < 0 or self.lambda_featkd < 0:
            raise ValueError("lambda weights must be >= 0")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid optimizer hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)


def stage_set(student) -> list[str]:
    """Names of stages where the student still has prunable layers."""
    return [s.name for s in student.stage_set()]


def _teacher_pass(teacher, batch: Batch):
    with ad.no_grad():
        out, feats = teacher.forward(batch.z_t, batch.y, batch.t)
    return out.data, {k: v.data for k, v in feats.items()}


def feature_alphas(teacher_feats: dict[str, np.ndarray], stages) -> tuple[dict[str, float], dict[str, float]]:
    """Per-stage ``alpha`` weights and the teacher norms they come from.

    A stage whose teacher norm is below ``NORM_FLOOR`` gets ``alpha = 0`` and
    is left out of the mean.
    """
    norms = {}
    for s in stages:
        f = teacher_feats[s]
        f = f.reshape(f.shape[0], -1) if f.ndim == 3 else f.reshape(1, -1)
        norms[s] = float(np.mean(np.sqrt(np.sum(f * f, axis=1))))
    live = [s for s in stages if norms[s] >= NORM_FLOOR]
    alphas = {s: 0.0 for s in stages}
    if live and len({norms[s] for s in live}) == 1:
        # the mean of equal floats need not round back to the same float
        alphas.update({s: 1.0 for s in live})
    elif live:
        mean_norm = sum(norms[s] for s in live) / len(live)
        for s in live:
            alphas[s] = mean_norm / norms[s]
    return alphas, norms


def _feature_terms(student_feats: dict[str, Tensor], teacher_feats: dict[str, np.ndarray], stages) -> dict[str, Tensor]:
    terms = {}
    for s in stages:
        if s not in student_feats or s not in teacher_feats:
            raise KeyError(f"stage {s} has no feature tap")
        terms[s] = ad.mean(ad.square(ad.sub(student_feats[s], teacher_feats[s])))
    return terms


def _weighted_sum(terms: dict[str, Tensor], weights: dict[str, float] | None) -> Tensor:
    total = Tensor(0.0)
    for s, term in terms.items():
        total = ad.add(total, term if weights is None else ad.scale(term, weights[s]))
    return total


def out_kd_loss(teacher, student, batch: Batch) -> Tensor:
    t_out, _ = _teacher_pass(teacher, batch)
    s_out, _ = student.forward(batch.z_t, batch.y, batch.t)
    if s_out.shape != t_out.shape:
        raise ad.ShapeError(f"teacher output {t_out.shape} vs student output {s_out.shape}")
    return ad.mean(ad.square(ad.sub(s_out, t_out)))


def feat_kd_loss(teacher, student, batch: Batch, stages=None) -> Tensor:
    stages = stage_set(student) if stages is None else list(stages)
    _, t_feats = _teacher_pass(teacher, batch)
    _, s_feats = student.forward(batch.z_t, batch.y, batch.t)
    return _weighted_sum(_feature_terms(s_feats, t_feats, stages), None)


def normalized_feat_kd_loss(teacher, student, batch: Batch, stages=None) -> Tensor:
    stages = stage_set(student) if stages is None else list(stages)
    _, t_feats = _teacher_pass(teacher, batch)
    _, s_feats = student.forward(batch.z_t, batch.y, batch.t)
    alphas, _ = feature_alphas(t_feats, stages)
    return _weighted_sum(_feature_terms(s_feats, t_feats, stages), alphas)


@dataclass
class LossTerms:
    total: Tensor
    task: float
    outkd: float
    feat_unnorm: dict[str, float]
    alpha: dict[str, float]
    teacher_norm: dict[str, float]


def total_loss(teacher, student, batch: Batch, config: DistillConfig, stages=None) -> LossTerms:
    stages = stage_set(student) if stages is None else list(stages)
    t_out, t_feats = _teacher_pass(teacher, batch)
    s_out, s_feats = student.forward(batch.z_t, batch.y, batch.t)
    task = ad.mean(ad.square(ad.sub(s_out, batch.eps)))
    outkd = ad.mean(ad.square(ad.sub(s_out, t_out)))
    terms = _feature_terms(s_feats, t_feats, stages)
    alphas, norms = feature_alphas(t_feats, stages)
    feat = _weighted_sum(terms, alphas if config.normalized else None)
    total = ad.add(ad.add(task, ad.scale(outkd, config.lambda_outkd)), ad.scale(feat, config.lambda_featkd))
    return LossTerms(total, task.item(), outkd.item(), {s: t.item() for s, t in terms.items()}, alphas, norms)


def evaluate(teacher, student, batch: Batch, stages=None) -> dict:
    """Loss terms on a fixed batch without building a graph."""
    with ad.no_grad():
        terms = total_loss(teacher, student, batch, DistillConfig(), stages)
    return {"task": terms.task, "outkd": terms.outkd, "feat_unnorm": terms.feat_unnorm,
            "alpha": terms.alpha, "teacher_norm": terms.teacher_norm}


class Adam:
    """Adaptive moments with decoupled weight decay (AdamW form)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.wd:
                p.data -= self.lr * self.wd * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class LogRow:
    iteration: int
    task: float
    outkd: float
    feat_unnorm: dict[str, float]
    alpha: dict[str, float]
    teacher_norm: dict[str, float]
    total: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("iter,task,outkd,stage,feat_unnorm,alpha,teacher_norm,total\n")
        for r in self.rows:
            head = f"{r.iteration},{r.task:.17g},{r.outkd:.17g}"
            for s, v in r.feat_unnorm.items():
                buf.write(f"{head},{s},{v:.17g},{r.alpha[s]:.17g},{r.teacher_norm[s]:.17g},{r.total:.17g}\n")
            buf.write(f"{head},ALL,{sum(r.feat_unnorm.values()):.17g},,,{r.total:.17g}\n")
        return buf.getvalue()


def _batch_seed(seed: int, iteration: int) -> int:
    return seed * 1_000_003 + iteration


def train(teacher, student, data: GaussianMixtureData, sched: NoiseSchedule, config: DistillConfig):
    """Train ``student`` in place against the frozen ``teacher``.

    Returns ``(student, TrainLog)``.  Rows hold the loss terms of the batch
    used for that iteration's update, measured before the update.
    """
    stages = stage_set(student)
    params = student.parameters()
    opt = Adam(params, config.learning_rate, (config.beta1, config.beta2), config.eps, config.weight_decay)
    every = 1 if config.iterations <= 1000 else 10
    tlog = TrainLog()
    for it in range(config.iterations):
        batch = make_batch(data, sched, _batch_seed(config.seed, it), config.batch_size)
        opt.zero_grad()
        terms = total_loss(teacher, student, batch, config, stages)
        total = terms.total.item()
        if it % every == 0 or it == config.iterations - 1:
            tlog.rows.append(LogRow(it, terms.task, terms.outkd, terms.feat_unnorm, terms.alpha, terms.teacher_norm, total))
        if not math.isfinite(total):
            log.error("non-finite loss at iteration %d", it)
            raise TrainingError(f"non-finite loss at iteration {it}", it, tlog)
        terms.total.backward()
        opt.step()
    opt.zero_grad()
    return student, tlog


def pretrain(net, data: GaussianMixtureData, sched: NoiseSchedule, iterations: int, learning_rate: float = 1e-3,
             batch_size: int = 32, seed: int = 0) -> list[float]:
    """Fit ``net`` to the denoising task alone; returns the loss curve."""
    opt = Adam(net.parameters(), learning_rate)
    losses = []
    for it in range(iterations):
        batch = make_batch(data, sched, _batch_seed(seed, it), batch_size)
        opt.zero_grad()
        pred, _ = net.forward(batch.z_t, batch.y, batch.t)
        loss = ad.mean(ad.square(ad.sub(pred, batch.eps)))
        losses.append(loss.item())
        if not math.isfinite(losses[-1]):
            raise TrainingError(f"non-finite loss at iteration {it}", it)
        loss.backward()
        opt.step()
    opt.zero_grad()
    return losses
