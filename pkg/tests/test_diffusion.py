import numpy as np
import pytest

from conftest import small_spec
from layerprune import autodiff as ad
from layerprune.diffusion import (GaussianMixtureData, NoiseSchedule, add_noise, make_batch, per_sample_task_loss,
                                  q_sample, sample_batch, task_loss)
from layerprune.toynet import build


class ConstNet:
    def __init__(self, value):
        self.value = value

    def forward(self, z_t, y, t):
        return ad.Tensor(self.value), {}


class TestSchedule:
    def test_linear(self, sched):
        assert sched.T == 100
        assert sched.betas[0] == 1e-4 and np.isclose(sched.betas[-1], 0.02)
        assert np.all(np.diff(sched.alpha_bars) < 0)

    def test_bad_betas(self):
        with pytest.raises(ValueError):
            NoiseSchedule.from_betas([0.1, 1.0])


class TestData:
    def test_deterministic(self, default_data):
        a, b = sample_batch(3, 20, default_data), sample_batch(3, 20, default_data)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_means_separated(self, default_data):
        m = default_data.means.reshape(default_data.num_classes, -1)
        d = np.linalg.norm(m[:, None] - m[None], axis=-1)
        assert d[~np.eye(len(m), dtype=bool)].min() >= 1.0

    def test_monte_carlo_means(self, default_data):
        # 10^4 draws per class
        z, y = default_data.sample(0, 10_000 * default_data.num_classes)
        for k in range(default_data.num_classes):
            mu = default_data.means[k]
            assert (y == k).sum() > 9_000
            assert np.linalg.norm(z[y == k].mean(axis=0) - mu) <= 0.05 * np.linalg.norm(mu)

    def test_batch(self, default_data, sched):
        b = make_batch(default_data, sched, 4, 32)
        assert len(b) == 32 and b.z_t.shape == (32, 16, 8)
        assert b.t.min() >= 0 and b.t.max() < sched.T
        np.testing.assert_array_equal(b.z_t, make_batch(default_data, sched, 4, 32).z_t)
        sub = b.subset([1, 2])
        np.testing.assert_array_equal(sub.eps, b.eps[1:3])


class TestNoise:
    def test_limits(self, rng):
        z, eps = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        np.testing.assert_array_equal(q_sample(z, eps, 1.0), z)
        np.testing.assert_array_equal(q_sample(z, eps, 0.0), eps)

    def test_hand_value(self):
        np.testing.assert_allclose(q_sample(np.zeros(5), np.ones(5), 0.25), np.sqrt(0.75) * np.ones(5), rtol=1e-15)

    def test_variance(self, sched, rng):
        t = 60
        eps = rng.normal(size=(20_000, 8))
        zt = add_noise(np.zeros((20_000, 8)) + 1.5, np.full(20_000, t), eps, sched)
        np.testing.assert_allclose(zt.var(axis=0), 1 - sched.alpha_bars[t], rtol=0.05)

    def test_errors(self, sched):
        with pytest.raises(ValueError):
            add_noise(np.zeros(3), 100, np.zeros(3), sched)
        with pytest.raises(ad.ShapeError):
            q_sample(np.zeros(3), np.zeros(4), 0.5)


class TestTaskLoss:
    def test_perfect_and_zero(self, default_data, sched):
        b = make_batch(default_data, sched, 1, 8)
        assert task_loss(ConstNet(b.eps), b).item() == 0.0
        np.testing.assert_allclose(task_loss(ConstNet(np.zeros_like(b.eps)), b).item(), np.mean(b.eps ** 2), rtol=1e-14)

    def test_scalar_oracle(self):
        spec = small_spec(5)
        net = build(spec)
        data = GaussianMixtureData((spec.tokens, spec.in_channels), spec.num_classes, seed=2)
        sched = NoiseSchedule.linear(spec.num_timesteps)
        b = make_batch(data, sched, 9, 3)
        pred = net.forward(b.z_t, b.y, b.t)[0].data
        total = 0.0
        for i in range(3):
            for v in (b.eps[i] - pred[i]).ravel():
                total += float(v) * float(v)
        np.testing.assert_allclose(task_loss(net, b).item(), total / b.eps.size, rtol=1e-12)
        np.testing.assert_allclose(task_loss(net, b, sched).item(), total / b.eps.size, rtol=1e-12)

    def test_non_negative(self, rng):
        assert np.all(per_sample_task_loss(rng.normal(size=(5, 2, 2)), rng.normal(size=(5, 2, 2))) >= 0)
