"""Vectors and reproducible random streams.

Every random draw in otafl comes from a :class:`RandomStream`. A stream is
a value: a master seed plus a structured id ``(device, round, purpose)``.
The generator behind it is rebuilt from a ``numpy.random.SeedSequence``
whose spawn key encodes that id, with the counter-based ``Philox`` bit
generator, so the same id always reproduces the same draws no matter how
many other streams were used before it or in which process.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from otafl.errors import InvalidArgumentError

SEED_MASK = (1 << 64) - 1


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


@dataclass(frozen=True)
class RandomStream:
    seed: int
    device: int | None = None
    round: int | None = None
    purpose: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.seed, (int, np.integer)):
            raise InvalidArgumentError(f"seed must be an integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed) & SEED_MASK)
        for name in ("device", "round"):
            value = getattr(self, name)
            if value is not None and value < 0:
                raise InvalidArgumentError(f"{name} index must be >= 0, got {value}")

    @property
    def stream_id(self) -> tuple[int, int, int]:
        device = 0 if self.device is None else self.device + 1
        rnd = 0 if self.round is None else self.round + 1
        return (device, rnd, _purpose_code(self.purpose))

    def child(self, *, device: int | None = None, round: int | None = None,
              purpose: str | None = None) -> "RandomStream":
        """Return a stream with some id fields replaced; ``self`` is untouched."""
        changes: dict = {}
        if device is not None:
            changes["device"] = device
        if round is not None:
            changes["round"] = round
        if purpose is not None:
            changes["purpose"] = purpose
        return replace(self, **changes)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.Philox(seq))


def as_vector(values: Iterable[float] | np.ndarray, *, name: str = "vector") -> np.ndarray:
    """Return a read-only 1-D float64 copy of ``values``.

    Raises InvalidArgumentError for non-finite entries or a non-1-D shape.
    """
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 1:
        raise InvalidArgumentError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


def gaussian_vector(stream: RandomStream, dim: int, variance: float) -> np.ndarray:
    """``dim`` i.i.d. N(0, variance) draws; the zero vector when variance is 0."""
    if dim < 1:
        raise InvalidArgumentError(f"dim must be >= 1, got {dim}")
    if not variance >= 0 or not math.isfinite(variance):
        raise InvalidArgumentError(f"variance must be finite and >= 0, got {variance}")
    if variance == 0:
        out = np.zeros(dim)
    else:
        out = stream.generator().normal(0.0, math.sqrt(variance), size=dim)
    out.setflags(write=False)
    return out


def rayleigh_draws(stream: RandomStream, mean: float, size: int) -> np.ndarray:
    """``size`` Rayleigh draws whose expected value is ``mean``."""
    if not mean > 0 or not math.isfinite(mean):
        raise InvalidArgumentError(f"Rayleigh mean must be positive, got {mean}")
    if size < 1:
        raise InvalidArgumentError(f"size must be >= 1, got {size}")
    scale = mean / math.sqrt(math.pi / 2.0)
    draws = stream.generator().rayleigh(scale, size=size)
    # rayleigh() maps U=0 to exactly 0; keep the support strictly positive
    draws = np.maximum(draws, np.finfo(np.float64).tiny)
    draws.setflags(write=False)
    return draws


def rayleigh_draw(stream: RandomStream, mean: float) -> float:
    return float(rayleigh_draws(stream, mean, 1)[0])
