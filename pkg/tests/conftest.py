import numpy as np
import pytest

from layerprune.diffusion import GaussianMixtureData, NoiseSchedule, make_calibration
from layerprune.toynet import NetworkSpec, build

TINY = dict(num_dn_stages=1, widths=(4,), tokens=4, dn_residual=1, dn_mixer=0, mid_residual=1, mid_mixer=0,
            up_residual=1, up_mixer=0, embed_dim=4, num_classes=3, num_timesteps=20)


def tiny_spec(seed=0, **kw):
    """Three prunable residual layers (Dn1, Mid, Up1)."""
    return NetworkSpec(**{**TINY, **kw, "seed": seed})


def small_spec(seed=0, **kw):
    base = dict(num_dn_stages=2, widths=(4, 6), tokens=8, dn_residual=1, dn_mixer=1, mid_residual=1, mid_mixer=1,
                up_residual=1, up_mixer=1, embed_dim=4, num_classes=4, num_timesteps=50)
    return NetworkSpec(**{**base, **kw, "seed": seed})


def data_for(spec, seed=11):
    return GaussianMixtureData((spec.tokens, spec.in_channels), spec.num_classes, seed=seed)


def calib_for(spec, n=16, seed=5):
    sched = NoiseSchedule.linear(spec.num_timesteps)
    return make_calibration(data_for(spec), sched, seed, n)


@pytest.fixture(scope="session")
def default_net():
    return build(NetworkSpec())


@pytest.fixture(scope="session")
def default_data():
    return GaussianMixtureData((16, 8), seed=100)


@pytest.fixture(scope="session")
def sched():
    return NoiseSchedule.linear()


@pytest.fixture(scope="session")
def default_calib(default_data, sched):
    return make_calibration(default_data, sched, seed=7, n=64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
