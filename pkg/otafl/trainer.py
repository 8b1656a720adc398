"""The federated training loop and its per-round record.

One round is the three-step protocol:

1. every device computes its local gradient at the shared model;
2. devices encode and transmit at the same time, the server receives the
   over-the-air sum and applies ``w <- w - eta_t * y``;
3. the new model is broadcast (shared state here, the downlink is ideal).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from otafl.aggregation import (AggregationStrategy, ModelState, StrategyKind, encode,
                               ideal_aggregate, server_update)
from otafl.channel import ChannelRealization, draw_channels, ota_superpose
from otafl.errors import DivergenceError, InvalidArgumentError, StepBoundViolation
from otafl.numerics import RandomStream
from otafl.optimizer import AmplificationPlan
from otafl.tasks import TrainingTask, max_defined_angle, measure_theta

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ("t", "loss", "grad_norm", "min_grad_norm", "gap", "theta_max", "eta",
                 "test_loss", "accuracy")
STEP_BOUND_RTOL = 1e-9
CHANNEL_MODES = ("static", "redraw")


@dataclass(frozen=True)
class RoundRecord:
    t: int
    loss: float
    grad_norm: float
    min_grad_norm: float
    gap: float | None
    theta_max: float
    eta: float
    test_loss: float | None = None
    accuracy: float | None = None
    local_grad_norms: tuple[float, ...] = ()

    def row(self) -> dict:
        return {
            "t": self.t,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "min_grad_norm": self.min_grad_norm,
            "gap": self.gap,
            "theta_max": self.theta_max,
            "eta": self.eta,
            "test_loss": self.test_loss,
            "accuracy": self.accuracy,
        }


@dataclass
class RunTrace:
    """Records for rounds t = 1 .. T+1; the last one is the model after T updates."""

    seed: int
    strategy: str
    records: list[RoundRecord] = field(default_factory=list)
    fingerprint: str = ""
    label: str = ""
    f_star: float | None = None
    g_breaches: int = 0
    theta_breaches: int = 0

    @property
    def rounds(self) -> int:
        """Number of updates performed (T)."""
        return max(len(self.records) - 1, 0)

    def column(self, name: str) -> np.ndarray:
        if name not in TRACE_COLUMNS:
            raise InvalidArgumentError(f"unknown trace column {name!r}")
        values = [getattr(r, name) for r in self.records]
        return np.array([math.nan if v is None else v for v in values], dtype=np.float64)

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss

    @staticmethod
    def mean_curve(traces: Sequence["RunTrace"], name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(t, mean, standard error)`` of a column across traces aligned on t."""
        if not traces:
            raise InvalidArgumentError("mean_curve needs at least one trace")
        lengths = {len(tr.records) for tr in traces}
        if len(lengths) != 1:
            raise InvalidArgumentError(f"traces have different lengths {sorted(lengths)}")
        stacked = np.stack([tr.column(name) for tr in traces])
        t = traces[0].column("t")
        mean = stacked.mean(axis=0)
        if len(traces) > 1:
            stderr = stacked.std(axis=0, ddof=1) / math.sqrt(len(traces))
        else:
            stderr = np.zeros_like(mean)
        return t, mean, stderr


@dataclass(frozen=True)
class SignTestResult:
    wins: int
    losses: int
    ties: int
    p_value: float

    def significant(self, level: float = 0.05) -> bool:
        return self.p_value < level


def paired_sign_test(first: Sequence[float], second: Sequence[float]) -> SignTestResult:
    """One-sided paired sign test of ``first < second``; ties are dropped."""
    first, second = np.asarray(first, dtype=np.float64), np.asarray(second, dtype=np.float64)
    if first.shape != second.shape or first.ndim != 1:
        raise InvalidArgumentError("sign test needs two paired 1-D samples of equal length")
    wins = int(np.sum(first < second))
    losses = int(np.sum(first > second))
    ties = first.size - wins - losses
    if wins + losses == 0:
        return SignTestResult(wins, losses, ties, 1.0)
    p = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
    return SignTestResult(wins, losses, ties, float(p))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def run(task: TrainingTask, chan: ChannelRealization, plan: AmplificationPlan,
        strategy: AggregationStrategy, T: int, master_seed: int, *,
        b_max: np.ndarray | None = None, batch_size: int = 0,
        channel_mode: str = "static", channel_mean: float | None = None,
        fingerprint: str = "", label: str = "") -> RunTrace:
    """Run T rounds and record every model from w^1 to w^{T+1}.

    Noise, batch and redrawn channels come from streams keyed by
    (round, purpose) or (device, round, purpose) under ``master_seed``,
    never by the strategy, so runs that differ only in ``strategy`` see
    identical randomness.
    """
    if T < 1:
        raise InvalidArgumentError(f"T must be >= 1, got {T}")
    if plan.b.size != chan.num_devices or task.num_devices != chan.num_devices:
        raise InvalidArgumentError(
            f"plan has {plan.b.size} devices, channel {chan.num_devices}, task {task.num_devices}")
    if chan.dim != task.dim:
        raise InvalidArgumentError(f"channel dimension {chan.dim} != model dimension {task.dim}")
    if channel_mode not in CHANNEL_MODES:
        raise InvalidArgumentError(f"channel_mode must be one of {CHANNEL_MODES}")
    if channel_mode == "redraw" and channel_mean is None:
        raise InvalidArgumentError("redraw mode needs the channel mean")

    constants = task.require_constants()
    cfg = plan.transmit_config(b_max)
    root = RandomStream(master_seed)
    F_star = task.optimum.F_star if task.optimum is not None else None
    check_step = strategy.kind is StrategyKind.NORMALIZED and chan.sigma2 == 0.0

    trace = RunTrace(seed=master_seed, strategy=strategy.name, fingerprint=fingerprint,
                     label=label or plan.label, f_star=F_star)
    state = ModelState(w=task.w_init)
    best = math.inf

    for t in range(1, T + 2):
        w = state.w
        local = task.local_grads(w)
        global_grad = task.weights @ local
        grad_norm = float(np.linalg.norm(global_grad))
        best = min(best, grad_norm)
        loss = task.loss(w)
        theta_max = max_defined_angle(measure_theta(task, w, local))
        test_loss, accuracy = task.holdout_metrics(w)
        local_norms = np.linalg.norm(local, axis=1)
        eta_t = plan.eta(t)
        trace.records.append(RoundRecord(
            t=t, loss=loss, grad_norm=grad_norm, min_grad_norm=best,
            gap=None if F_star is None else loss - F_star, theta_max=theta_max, eta=eta_t,
            test_loss=test_loss, accuracy=accuracy,
            local_grad_norms=tuple(float(v) for v in local_norms)))
        if t == T + 1:
            break

        if batch_size > 0:
            grads = np.stack([
                task.batch_grad(k, w, root.child(device=k, round=t, purpose="batch"), batch_size)
                for k in range(task.num_devices)])
            sent_norms = np.linalg.norm(grads, axis=1)
        else:
            grads, sent_norms = local, local_norms

        if np.any(sent_norms > constants.G):
            trace.g_breaches += 1
            logger.debug("round %d: gradient norm %.4g exceeds G=%.4g", t,
                         float(sent_norms.max()), constants.G)
        if theta_max > constants.theta_th:
            trace.theta_breaches += 1
            logger.debug("round %d: angle %.4f exceeds theta_th=%.4f", t, theta_max,
                         constants.theta_th)

        if strategy.kind is StrategyKind.IDEAL:
            y = ideal_aggregate(grads, task.weights)
        else:
            chan_t = chan
            if channel_mode == "redraw":
                chan_t = draw_channels(root.child(round=t, purpose="channel"), chan.num_devices,
                                       channel_mean, sigma2=chan.sigma2, dim=chan.dim)
            signals = [encode(strategy, g) for g in grads]
            y = ota_superpose(signals, cfg, chan_t, root.child(round=t, purpose="noise"))

        step = eta_t * y
        if not np.all(np.isfinite(step)) or not np.all(np.isfinite(w - step)):
            raise DivergenceError(
                f"model left the finite range (|y|={float(np.linalg.norm(y)):.3g})", t)
        if check_step:
            limit = eta_t * cfg.a * cfg.effective_gain(chan_t)
            moved = float(np.linalg.norm(step))
            if moved > limit * (1 + STEP_BOUND_RTOL):
                raise StepBoundViolation(f"step {moved:.17g} exceeds {limit:.17g}", t)
        state = server_update(state, y, eta_t)

    if trace.g_breaches or trace.theta_breaches:
        logger.warning("seed %d %s: G exceeded in %d rounds, theta_th exceeded in %d rounds",
                       master_seed, strategy.name, trace.g_breaches, trace.theta_breaches)
    return trace
