"""Closed-form convergence bounds and their check against measured runs.

Both bounds share the noise bracket

    B = sum_k 4 h_k^2 b_k^2 + (sum_k h_k b_k)^2 + N sigma2.

Smooth case, eta_t = 1/t^p with 1/2 < p < 1:

    min_t ||grad F(w^t)|| <= deltaF / (T^{1-p} cos(theta) a sum hb)
                             + 2p / (T^{1-p} (2p - 1)) * a L / (2 cos(theta) sum hb) * B

Strongly convex case, constant eta:

    F(w^T) - F* <= L/2 q^{T-1} ||w^1 - w*||^2
                   + L/2 max(a eta G / (2 M cos(theta) sum hb), a^2 eta^2) * B

with q = max(1 - 2 M cos(theta) eta a sum hb / G, 0) and q^0 = 1.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import stats

from otafl.channel import ChannelRealization
from otafl.errors import InvalidArgumentError
from otafl.optimizer import AmplificationPlan, EtaSchedule
from otafl.tasks import TrainingTask
from otafl.trainer import RunTrace

logger = logging.getLogger(__name__)

RIGHT_ANGLE = math.pi / 2
MARGIN_RTOL = 1e-12
FLOOR_WINDOW = 0.1
ANGLE_GRAD_FRACTION = 0.5
SLOPE_SLACK = 0.05


@dataclass(frozen=True)
class BoundInputs:
    T: int
    a: float
    b: np.ndarray
    eta: EtaSchedule
    h: np.ndarray
    sigma2: float
    N: int
    L: float
    M: float
    G: float
    theta_th: float
    deltaF: float | None = None
    init_dist2: float | None = None

    @classmethod
    def from_plan(cls, plan: AmplificationPlan, chan: ChannelRealization, task: TrainingTask,
                  T: int, *, deltaF: float | None = None,
                  theta_th: float | None = None) -> "BoundInputs":
        c = task.require_constants()
        init_dist2 = None
        if task.optimum is not None:
            diff = task.w_init - task.optimum.w_star
            init_dist2 = float(diff @ diff)
        return cls(T=T, a=plan.a, b=plan.b, eta=plan.eta, h=chan.h, sigma2=chan.sigma2,
                   N=chan.dim, L=c.L, M=c.M, G=c.G,
                   theta_th=c.theta_th if theta_th is None else theta_th,
                   deltaF=deltaF, init_dist2=init_dist2)

    @property
    def gain(self) -> float:
        return float(np.dot(self.h, self.b))

    @property
    def bracket(self) -> float:
        hb = self.h * self.b
        return 4.0 * float(hb @ hb) + self.gain ** 2 + self.N * self.sigma2

    @property
    def q_max(self) -> float:
        eta = self.eta(1)
        return max(1.0 - 2 * self.M * math.cos(self.theta_th) * eta * self.a * self.gain / self.G, 0.0)


def _check_common(inputs: BoundInputs, lemma: str) -> None:
    if inputs.T < 1:
        raise InvalidArgumentError(f"{lemma}: T must be >= 1, got {inputs.T}")
    if not inputs.a > 0:
        raise InvalidArgumentError(f"{lemma}: hypothesis a > 0 violated (a={inputs.a})")
    if not inputs.gain > 0:
        raise InvalidArgumentError(f"{lemma}: hypothesis sum_k h_k b_k > 0 violated")
    if not 0 <= inputs.theta_th < RIGHT_ANGLE:
        raise InvalidArgumentError(
            f"{lemma}: hypothesis theta_th < pi/2 violated (theta_th={inputs.theta_th:.6g})")


def lemma1_rhs(inputs: BoundInputs) -> float:
    """Bound on min_{t<=T} ||grad F(w^t)|| for eta_t = scale / t^p."""
    _check_common(inputs, "smooth-case bound")
    if inputs.eta.kind != "power" or not 0.5 < inputs.eta.p < 1:
        raise InvalidArgumentError(
            "smooth-case bound: hypothesis eta_t = 1/t^p with 1/2 < p < 1 violated")
    if inputs.deltaF is None:
        raise InvalidArgumentError("smooth-case bound needs deltaF")
    p = inputs.eta.p
    a = inputs.a * inputs.eta.scale
    cos = math.cos(inputs.theta_th)
    decay = inputs.T ** (1 - p)
    first = inputs.deltaF / (decay * cos * a * inputs.gain)
    second = (2 * p / (decay * (2 * p - 1))) * (a * inputs.L / (2 * cos * inputs.gain)) * inputs.bracket
    return first + second


def lemma2_rhs(inputs: BoundInputs) -> float:
    """Bound on F(w^T) - F* for a constant learning rate."""
    _check_common(inputs, "strongly convex bound")
    if inputs.eta.kind != "constant":
        raise InvalidArgumentError("strongly convex bound: hypothesis of a constant eta violated")
    if not inputs.M > 0:
        raise InvalidArgumentError("strongly convex bound: hypothesis M > 0 violated")
    if inputs.init_dist2 is None:
        raise InvalidArgumentError("strongly convex bound needs ||w^1 - w*||^2")
    decay = 1.0 if inputs.T == 1 else inputs.q_max ** (inputs.T - 1)
    first = 0.5 * inputs.L * decay * inputs.init_dist2
    return first + lemma2_floor(inputs)


def lemma2_floor(inputs: BoundInputs) -> float:
    """The T-independent second term of the strongly convex bound."""
    eta = inputs.eta.eta
    cos = math.cos(inputs.theta_th)
    factor = max(inputs.a * eta * inputs.G / (2 * inputs.M * cos * inputs.gain),
                 inputs.a ** 2 * eta ** 2)
    return 0.5 * inputs.L * factor * inputs.bracket


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    lemma: str
    T: np.ndarray
    measured: np.ndarray
    bound: np.ndarray
    stderr: np.ndarray
    seeds: int
    theta_used: float
    details: dict = field(default_factory=dict)

    @property
    def margin(self) -> np.ndarray:
        return self.bound - self.measured

    @property
    def violations(self) -> list[int]:
        tol = MARGIN_RTOL * np.maximum(np.abs(self.bound), 1.0)
        return [int(t) for t, m, e in zip(self.T, self.margin, tol) if m < -e]

    @property
    def passed(self) -> bool:
        return not self.violations

    def rows(self) -> list[dict]:
        return [
            {"T": int(t), "measured": float(m), "bound": float(b), "margin": float(b - m),
             "stderr": float(s)}
            for t, m, b, s in zip(self.T, self.measured, self.bound, self.stderr)
        ]

    def to_dict(self) -> dict:
        return {
            "lemma": self.lemma,
            "seeds": self.seeds,
            "theta_used": self.theta_used,
            "passed": self.passed,
            "violations": self.violations,
            "min_margin": float(np.min(self.margin)) if self.margin.size else None,
            "details": self.details,
            "rows": self.rows(),
        }


@dataclass(frozen=True)
class ThetaCheck:
    """Measured bias angles of a set of runs against the configured cap.

    ``theta_used`` is max(configured, largest measured angle). When that
    reaches pi/2 the bounds are vacuous, so the check falls back to the
    angles measured while ||grad F|| >= ANGLE_GRAD_FRACTION ||grad F(w^1)||
    and the verdict is marked ``conditional``. Near a stationary point the
    global gradient vanishes while local gradients do not, which is where
    the large angles come from.
    """

    configured: float
    measured_max: float | None
    filtered_max: float | None
    breaches: int
    rounds: int
    skipped: int

    @property
    def unfiltered(self) -> float:
        return max(self.configured, self.measured_max if self.measured_max is not None else -math.inf)

    @property
    def conditional(self) -> bool:
        return self.unfiltered >= RIGHT_ANGLE

    @property
    def theta_used(self) -> float:
        if not self.conditional:
            return self.unfiltered
        return max(self.configured, self.filtered_max if self.filtered_max is not None else -math.inf)

    def to_dict(self) -> dict:
        return {
            "theta_configured": self.configured,
            "theta_measured_max": self.measured_max,
            "theta_filtered_max": self.filtered_max,
            "theta_breaches": self.breaches,
            "angle_rounds": self.rounds,
            "angle_rounds_skipped": self.skipped,
            "conditional": self.conditional,
        }


def _finite_max(values: np.ndarray) -> float | None:
    values = values[np.isfinite(values)]
    return float(values.max()) if values.size else None


def effective_theta(traces: Sequence[RunTrace], configured: float) -> ThetaCheck:
    """Collect the measured angles of every round of every trace."""
    every, counted = [], []
    for tr in traces:
        norms, angles = tr.column("grad_norm"), tr.column("theta_max")
        every.append(angles)
        counted.append(angles[norms >= ANGLE_GRAD_FRACTION * norms[0]])
    every_angles = np.concatenate(every) if every else np.array([])
    counted_angles = np.concatenate(counted) if counted else np.array([])
    return ThetaCheck(
        configured=configured,
        measured_max=_finite_max(every_angles),
        filtered_max=_finite_max(counted_angles),
        breaches=int(np.sum(every_angles[np.isfinite(every_angles)] > configured)),
        rounds=int(every_angles.size),
        skipped=int(every_angles.size - counted_angles.size),
    )


def _require_traces(traces: Sequence[RunTrace] | RunTrace) -> list[RunTrace]:
    if isinstance(traces, RunTrace):
        traces = [traces]
    traces = list(traces)
    if not traces:
        raise InvalidArgumentError("no traces to verify")
    if len({len(tr.records) for tr in traces}) != 1:
        raise InvalidArgumentError("traces must have the same number of rounds")
    return traces


def verify_lemma1(traces: Sequence[RunTrace] | RunTrace, inputs: BoundInputs) -> BoundReport:
    """Mean min-so-far gradient norm against the smooth-case bound at every T.

    deltaF at horizon T is the seed mean of F(w^1) - F(w^{T+1}).
    """
    traces = _require_traces(traces)
    angles = effective_theta(traces, inputs.theta_th)
    theta = angles.theta_used
    T_max = traces[0].rounds
    if T_max < 1:
        raise InvalidArgumentError("traces need at least one update")
    losses = np.stack([tr.column("loss") for tr in traces])
    min_norms = np.stack([tr.column("min_grad_norm") for tr in traces])
    horizons = np.arange(1, T_max + 1)
    measured = min_norms[:, :T_max].mean(axis=0)
    stderr = _stderr(min_norms[:, :T_max])
    deltaF = (losses[:, :1] - losses[:, 1:T_max + 1]).mean(axis=0)

    bound = np.array([
        lemma1_rhs(replace(inputs, T=int(T), theta_th=theta, deltaF=float(d)))
        for T, d in zip(horizons, deltaF)])
    report = BoundReport(lemma="smooth", T=horizons, measured=measured, bound=bound,
                         stderr=stderr, seeds=len(traces), theta_used=theta,
                         details={**angles.to_dict(),
                                  "final_deltaF": float(deltaF[-1]),
                                  "indicative_only": len(traces) == 1})
    _log_report(report)
    return report


def verify_lemma2(traces: Sequence[RunTrace] | RunTrace, inputs: BoundInputs) -> BoundReport:
    """Mean optimality gap against the strongly convex bound at every T.

    Also records the steady-state floor against the bias target and a
    log-linear fit of the decaying part against log(q_max); both are
    report details, not violations.
    """
    traces = _require_traces(traces)
    angles = effective_theta(traces, inputs.theta_th)
    theta = angles.theta_used
    gaps = np.stack([tr.column("gap") for tr in traces])
    if np.any(np.isnan(gaps)):
        raise InvalidArgumentError("strongly convex check needs traces with a known F*")
    horizons = np.arange(1, gaps.shape[1] + 1)
    measured = gaps.mean(axis=0)
    stderr = _stderr(gaps)
    checked = replace(inputs, theta_th=theta)
    bound = np.array([lemma2_rhs(replace(checked, T=int(T))) for T in horizons])

    floor_bound = lemma2_floor(checked)
    window = max(1, int(round(FLOOR_WINDOW * gaps.shape[1])))
    tail = gaps[:, -window:].mean(axis=1)
    floor = float(tail.mean())
    floor_se = float(tail.std(ddof=1) / math.sqrt(tail.size)) if tail.size > 1 else 0.0
    slope, q_max = _decay_slope(horizons, measured, floor), inputs.q_max
    eps = lemma2_floor(inputs)
    details = {
        **angles.to_dict(),
        "q_max": q_max,
        "floor_measured": floor,
        "floor_stderr": floor_se,
        "floor_bound": floor_bound,
        "floor_target": eps,
        "floor_within_target": floor <= eps + 2 * floor_se,
        "fitted_slope": slope,
        "log_q_max": math.log(q_max) if q_max > 0 else -math.inf,
        "rate_consistent": (not math.isnan(slope) and q_max > 0
                            and slope >= math.log(q_max) - SLOPE_SLACK),
        "indicative_only": len(traces) == 1,
    }
    report = BoundReport(lemma="strongly_convex", T=horizons, measured=measured, bound=bound,
                         stderr=stderr, seeds=len(traces), theta_used=theta, details=details)
    _log_report(report)
    return report


def _stderr(samples: np.ndarray) -> np.ndarray:
    if samples.shape[0] < 2:
        return np.zeros(samples.shape[1])
    return samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])


def _decay_slope(t: np.ndarray, gap: np.ndarray, floor: float) -> float:
    """Slope of log(gap - floor) over the rounds where the excess is well above the floor."""
    excess = gap - floor
    keep = excess > max(floor, 0.0) + 1e-300
    if keep.sum() < 3:
        return math.nan
    # only the leading run of decaying rounds
    stop = int(np.argmin(keep)) if not keep.all() else keep.size
    if stop < 3:
        return math.nan
    fit = stats.linregress(t[:stop], np.log(excess[:stop]))
    return float(fit.slope)


def _log_report(report: BoundReport) -> None:
    if report.passed:
        logger.info("%s bound holds at all %d horizons (min margin %.4g)", report.lemma,
                    report.T.size, float(np.min(report.margin)))
    else:
        logger.warning("%s bound violated at %d horizons, first T=%d", report.lemma,
                       len(report.violations), report.violations[0])
