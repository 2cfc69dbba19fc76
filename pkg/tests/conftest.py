import numpy as np
import pytest
import torch

from viscontext.denoiser import DenoiserConfig, init_denoiser
from viscontext.schedule import linear_schedule, short_schedule

torch.set_num_threads(1)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training runs")


@pytest.fixture
def tiny_cfg():
    return DenoiserConfig(base_width=8, depth=2, attn_levels=(1,), cond_dim=8, time_dim=16, heads=2, groups=4)


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_denoiser(tiny_cfg, seed=0)


@pytest.fixture
def sched():
    return linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def short():
    return short_schedule(100)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(label: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
