"""Synthetic epsilon-prediction task: class-conditional Gaussian mixture
latents, a linear beta schedule, forward noising and the task loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "NoiseSchedule",
    "GaussianMixtureData",
    "Batch",
    "sample_batch",
    "q_sample",
    "add_noise",
    "make_batch",
    "make_calibration",
    "task_loss",
    "per_sample_task_loss",
]


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0 or np.any((betas <= 0) | (betas >= 1)):
            raise ValueError("betas must be a non-empty 1-D array with entries in (0, 1)")
        return cls(betas, np.cumprod(1.0 - betas))

    @classmethod
    def linear(cls, num_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls.from_betas(np.linspace(beta_start, beta_end, num_steps))

    @property
    def T(self) -> int:
        return int(self.betas.size)


class GaussianMixtureData:
    """One anisotropic Gaussian component per condition class.

    Class means are scaled rows of a random orthonormal frame, so any two
    means are ``mean_scale * sqrt(2)`` apart.
    """

    def __init__(self, shape: tuple[int, int], num_classes: int = 8, seed: int = 0, mean_scale: float = 3.0,
                 std_range: tuple[float, float] = (0.3, 1.0)):
        self.shape = tuple(shape)
        self.num_classes = num_classes
        self.seed = seed
        dim = int(np.prod(self.shape))
        if dim < num_classes:
            raise ValueError(f"need at least {num_classes} latent dimensions, got {dim}")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(dim, num_classes)))
        self.means = mean_scale * q.T.reshape((num_classes,) + self.shape)
        self.stds = rng.uniform(*std_range, size=(num_classes,) + self.shape)

    def sample(self, seed: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        if n < 1:
            raise ValueError("n must be >= 1")
        rng = np.random.default_rng(seed)
        y = rng.integers(0, self.num_classes, size=n)
        z = self.means[y] + self.stds[y] * rng.normal(size=(n,) + self.shape)
        return z, y


def sample_batch(generator_seed: int, n: int, data: GaussianMixtureData) -> tuple[np.ndarray, np.ndarray]:
    return data.sample(generator_seed, n)


def q_sample(z, eps, alpha_bar):
    """sqrt(abar) z + sqrt(1 - abar) eps; ``alpha_bar`` may be per-sample."""
    z, eps = np.asarray(z, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if z.shape != eps.shape:
        raise ad.ShapeError(f"add_noise: z shape {z.shape} differs from eps shape {eps.shape}")
    ab = np.asarray(alpha_bar, dtype=np.float64)
    ab = ab.reshape(ab.shape + (1,) * (z.ndim - ab.ndim))
    return np.sqrt(ab) * z + np.sqrt(1.0 - ab) * eps


def add_noise(z, t, eps, sched: NoiseSchedule):
    t = np.asarray(t, dtype=np.int64)
    if np.any((t < 0) | (t >= sched.T)):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    return q_sample(z, eps, sched.alpha_bars[t])


@dataclass(frozen=True)
class Batch:
    """Paired tuples (z, y, t, eps); ``z_t`` is derived with the schedule."""

    z: np.ndarray
    y: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    z_t: np.ndarray
    seed: int

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "Batch":
        idx = np.atleast_1d(np.asarray(idx))
        return Batch(self.z[idx], self.y[idx], self.t[idx], self.eps[idx], self.z_t[idx], self.seed)


def make_batch(data: GaussianMixtureData, sched: NoiseSchedule, seed: int, n: int) -> Batch:
    z, y = data.sample(seed, n)
    rng = np.random.default_rng([seed, 1])
    t = rng.integers(0, sched.T, size=n)
    eps = rng.normal(size=z.shape)
    return Batch(z, y, t, eps, add_noise(z, t, eps, sched), seed)


def make_calibration(data: GaussianMixtureData, sched: NoiseSchedule, seed: int, n: int = 256) -> Batch:
    """Fixed calibration tuples; every criterion evaluation reuses them."""
    return make_batch(data, sched, seed, n)


def per_sample_task_loss(eps_pred, eps) -> np.ndarray:
    diff = np.asarray(eps_pred, dtype=np.float64) - np.asarray(eps, dtype=np.float64)
    return np.mean(diff.reshape(diff.shape[0], -1) ** 2, axis=1)


def task_loss(net, batch: Batch, sched: NoiseSchedule | None = None) -> Tensor:
    """Mean over tuples and elements of (eps - eps_pred)^2."""
    if len(batch) == 0:
        raise ValueError("task_loss needs a non-empty batch")
    z_t = batch.z_t if sched is None else add_noise(batch.z, batch.t, batch.eps, sched)
    pred, _ = net.forward(z_t, batch.y, batch.t)
    return ad.mean(ad.square(ad.sub(pred, batch.eps)))
