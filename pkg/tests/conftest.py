"""Pytest configuration and shared fixtures for the otafl test suite."""
from __future__ import annotations

import math

import numpy as np
import pytest

from otafl.channel import ChannelRealization
from otafl.datasets import Dataset, partition_data
from otafl.numerics import RandomStream
from otafl.optimizer import AmplificationPlan, EtaSchedule, SolverArtifacts
from otafl.tasks import RidgeTask, make_ridge_task


@pytest.fixture(autouse=True)
def isolated_output_root(tmp_path, monkeypatch):
    """Keep every test away from the real artifacts/ directory."""
    monkeypatch.setenv("OTAFL_OUTPUT_ROOT", str(tmp_path / "artifacts"))
    monkeypatch.setenv("OTAFL_MAX_WORKERS", "1")


@pytest.fixture
def stream() -> RandomStream:
    return RandomStream(1234)


@pytest.fixture
def identity_ridge() -> RidgeTask:
    """X = I (2 samples, 2 features), y = (1, 2), no regularization, one device.

    F(w) = ||w - y||^2 / 4, so L = M = 1/2, w* = (1, 2) and F* = 0.
    """
    dataset = Dataset(features=np.eye(2), labels=np.array([1.0, 2.0]))
    partition = partition_data(RandomStream(0), dataset, 1)
    return RidgeTask(dataset, partition, ridge_coeff=0.0, G=2.0)


@pytest.fixture
def small_ridge() -> RidgeTask:
    return make_ridge_task(RandomStream(7), num_devices=4, samples_per_device=20, dim=3,
                           noise_std=0.3, ridge_coeff=0.1, warmup_rounds=30)


def unit_channel(num_devices: int, dim: int, sigma2: float = 0.0) -> ChannelRealization:
    return ChannelRealization(h=np.ones(num_devices), sigma2=sigma2, dim=dim)


def manual_plan(a: float, b, eta: EtaSchedule) -> AmplificationPlan:
    b = np.asarray(b, dtype=np.float64)
    provenance = SolverArtifacts(r_star=2.0, Z=4.0, b_star=b, iterations=0)
    return AmplificationPlan(a=a, b=b, eta=eta, provenance=provenance, label="manual")


@pytest.fixture
def tiny_config_text() -> str:
    return "\n".join([
        "case=I",
        "task=ridge",
        "num_devices=4",
        "samples_per_device=20",
        "dim=3",
        "warmup_rounds=20",
        "sigma2=1e-8",
        "rounds=15",
        "seeds=0-1",
        f"theta_th={math.pi / 3!r}",
    ]) + "\n"
