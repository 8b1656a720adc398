"""Wireless multiple-access channel for over-the-air aggregation.

Devices transmit analog signals at the same time; the server receives the
channel-weighted sum plus Gaussian noise and scales it by its own gain:

    y = a * (sum_k h_k b_k x_k + z),   z ~ N(0, sigma2 I)

Channels are real and positive (phase alignment is assumed done before
transmission). The noise dimension is the model dimension, so the noise
energy entering every bound is ``dim * sigma2``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from otafl.errors import InvalidArgumentError
from otafl.numerics import RandomStream, as_vector, gaussian_vector, rayleigh_draws

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ChannelRealization:
    h: np.ndarray
    sigma2: float
    dim: int
    seed: int | None = None

    def __post_init__(self) -> None:
        h = as_vector(self.h, name="h")
        if h.size == 0:
            raise InvalidArgumentError("channel needs at least one device")
        if np.any(h <= 0):
            raise InvalidArgumentError("channel coefficients must be positive")
        if not self.sigma2 >= 0 or not math.isfinite(self.sigma2):
            raise InvalidArgumentError(f"sigma2 must be finite and >= 0, got {self.sigma2}")
        if int(self.dim) < 1:
            raise InvalidArgumentError(f"dim must be >= 1, got {self.dim}")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        object.__setattr__(self, "dim", int(self.dim))

    @property
    def num_devices(self) -> int:
        return int(self.h.size)

    @property
    def noise_energy(self) -> float:
        """``dim * sigma2``, the noise term shared by both convergence bounds."""
        return self.dim * self.sigma2

    def to_dict(self) -> dict:
        return {
            "h": [float(v) for v in self.h],
            "sigma2": self.sigma2,
            "dim": self.dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChannelRealization":
        try:
            return cls(h=data["h"], sigma2=float(data["sigma2"]), dim=int(data["dim"]),
                       seed=data.get("seed"))
        except KeyError as exc:
            raise InvalidArgumentError(f"channel document is missing field {exc}") from exc


@dataclass(frozen=True)
class TransmitConfig:
    a: float
    b: np.ndarray
    b_max: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        b = as_vector(self.b, name="b")
        if self.b_max is None:
            # no explicit limit: b itself is the limit, silent devices included
            b_max = b.copy()
        else:
            b_max = as_vector(self.b_max, name="b_max")
            if np.any(b_max <= 0):
                raise InvalidArgumentError("b_max entries must be positive")
        if b.shape != b_max.shape:
            raise InvalidArgumentError(
                f"b has {b.size} entries but b_max has {b_max.size}")
        if not self.a > 0 or not math.isfinite(self.a):
            raise InvalidArgumentError(f"server amplification a must be positive, got {self.a}")
        if np.any(b < 0) or np.any(b > b_max):
            raise InvalidArgumentError("device amplifications must satisfy 0 <= b_k <= b_max_k")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "b_max", b_max)

    def effective_gain(self, chan: ChannelRealization) -> float:
        """sum_k h_k b_k."""
        if chan.num_devices != self.b.size:
            raise InvalidArgumentError(
                f"channel has {chan.num_devices} devices but config has {self.b.size}")
        return float(np.dot(chan.h, self.b))


def ota_superpose(signals: Sequence[np.ndarray], cfg: TransmitConfig,
                  chan: ChannelRealization, noise_stream: RandomStream) -> np.ndarray:
    """Received and server-scaled signal ``a * (sum_k h_k b_k x_k + z)``."""
    if len(signals) != chan.num_devices:
        raise InvalidArgumentError(
            f"expected {chan.num_devices} device signals, got {len(signals)}")
    stacked = np.asarray(signals, dtype=np.float64)
    if stacked.ndim != 2 or stacked.shape[1] != chan.dim:
        raise InvalidArgumentError(
            f"signals must have length {chan.dim}, got shape {stacked.shape}")
    gain = cfg.effective_gain(chan)
    if gain <= 0:
        raise InvalidArgumentError("sum_k h_k b_k must be positive for an update")

    weights = chan.h * cfg.b
    received = weights @ stacked
    if chan.sigma2 > 0:
        received = received + gaussian_vector(noise_stream, chan.dim, chan.sigma2)
    return cfg.a * received


def draw_channels(stream: RandomStream, num_devices: int, mean: float, *,
                  sigma2: float, dim: int) -> ChannelRealization:
    """K independent Rayleigh coefficients with the given mean."""
    if num_devices < 1:
        raise InvalidArgumentError(f"K must be >= 1, got {num_devices}")
    h = rayleigh_draws(stream, mean, num_devices)
    return ChannelRealization(h=h, sigma2=sigma2, dim=dim, seed=stream.seed)


def save_channel(chan: ChannelRealization, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(chan.to_dict(), indent=2), encoding="utf-8")
    logger.debug("wrote channel realization to %s", path)
    return path


def load_channel(path: str | Path) -> ChannelRealization:
    return ChannelRealization.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
