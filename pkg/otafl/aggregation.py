"""Device-side signal construction and the server update.

Four ways for a device to turn its local gradient into a transmit signal:

* ``normalized``        g / ||g||                     (proposed method)
* ``raw_conservative``  g / G                         (benchmark: worst-case norm)
* ``standardized``      (g - mean(g)) / (std(g) sqrt(N)) (benchmark: per-vector standardization)
* ``ideal``             g, aggregated without a channel

Every channel encoding except ``raw_conservative`` sends a unit-norm signal,
so the normalized and standardized runs share one transmit power.

The server always applies ``w <- w - eta * y`` to the received signal.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from otafl.errors import InvalidArgumentError
from otafl.numerics import as_vector

ZERO_NORM_THRESHOLD = 1e-12


class StrategyKind(str, Enum):
    NORMALIZED = "normalized"
    RAW_CONSERVATIVE = "raw_conservative"
    STANDARDIZED = "standardized"
    IDEAL = "ideal"


@dataclass(frozen=True)
class AggregationStrategy:
    kind: StrategyKind
    G: float | None = None

    def __post_init__(self) -> None:
        try:
            kind = StrategyKind(self.kind)
        except ValueError as exc:
            names = ", ".join(k.value for k in StrategyKind)
            raise InvalidArgumentError(f"unknown strategy {self.kind!r}; expected one of {names}") from exc
        object.__setattr__(self, "kind", kind)
        if kind is StrategyKind.RAW_CONSERVATIVE:
            if self.G is None or not self.G > 0 or not math.isfinite(self.G):
                raise InvalidArgumentError("raw_conservative needs a positive gradient bound G")

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def uses_channel(self) -> bool:
        return self.kind is not StrategyKind.IDEAL


@dataclass(frozen=True)
class ModelState:
    w: np.ndarray
    t: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", as_vector(self.w, name="w"))
        if self.t < 1:
            raise InvalidArgumentError(f"round index starts at 1, got {self.t}")


def encode(strategy: AggregationStrategy, g: np.ndarray) -> np.ndarray:
    """Map a local gradient to the signal a device transmits."""
    g = as_vector(g, name="gradient")
    kind = strategy.kind

    if kind is StrategyKind.NORMALIZED:
        norm = float(np.linalg.norm(g))
        if norm < ZERO_NORM_THRESHOLD:
            return np.zeros_like(g)
        return g / norm

    if kind is StrategyKind.RAW_CONSERVATIVE:
        return g / strategy.G

    if kind is StrategyKind.STANDARDIZED:
        std = float(np.std(g))  # population std
        if std < ZERO_NORM_THRESHOLD:
            return np.zeros_like(g)
        # ||g - mean|| = std sqrt(N)
        return (g - g.mean()) / (std * math.sqrt(g.size))

    return g.copy()


def ideal_aggregate(grads: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Noise-free federated aggregate ``sum_k weight_k g_k``."""
    stacked = np.asarray(grads, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if stacked.ndim != 2 or stacked.shape[0] != weights.size:
        raise InvalidArgumentError(
            f"{weights.size} weights do not match gradients of shape {stacked.shape}")
    return weights @ stacked


def server_update(state: ModelState, y: np.ndarray, eta_t: float) -> ModelState:
    """``w <- w - eta_t * y`` and advance the round index."""
    if not eta_t > 0 or not math.isfinite(eta_t):
        raise InvalidArgumentError(f"learning rate must be positive, got {eta_t}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != state.w.shape:
        raise InvalidArgumentError(
            f"update has shape {y.shape}, model has shape {state.w.shape}")
    return ModelState(w=state.w - eta_t * y, t=state.t + 1)
