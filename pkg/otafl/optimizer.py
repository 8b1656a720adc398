"""System-parameter optimization for over-the-air aggregation.

The central quantity is

    Z = min_{0 <= b <= b_max} (sum_k 4 h_k^2 b_k^2 + N sigma2) / (sum_k h_k b_k)^2,

a nonconvex fractional program. Writing r = sqrt(ratio) turns it into a
one-dimensional search: for fixed r the set

    sqrt(sum_k 4 h_k^2 b_k^2 + N sigma2) <= r * sum_k h_k b_k

is convex in b, so "is r achievable inside the box" is a convex
feasibility question. ``solve_Z`` bisects on r and answers each question
through the convex gap

    phi_r(b) = sqrt(sum_k 4 h_k^2 b_k^2 + N sigma2) - r * sum_k h_k b_k,

starting from the exact ratio minimizer (a water-filling level search) and
returning either a feasible point or a certificate that phi_r > 0 on the
whole box.

Z then feeds the closed-form parameter choices for the smooth case
(Case I: server gain from the optimal S) and the strongly convex case
(Case II: server gain from the target contraction s or bias floor eps).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import TYPE_CHECKING

import numpy as np

from otafl.channel import ChannelRealization, TransmitConfig
from otafl.errors import InvalidArgumentError, SolverFailure

if TYPE_CHECKING:
    from otafl.tasks import TrainingTask

logger = logging.getLogger(__name__)

STATIONARITY_TOL = 1e-9
MAX_DESCENT_ITERATIONS = 20_000
ARMIJO = 1e-4
ORACLE_MAX_DEVICES = 4


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EtaSchedule:
    """Learning-rate schedule: ``scale / t**p`` (power) or a constant ``eta``."""

    kind: str
    p: float | None = None
    eta: float | None = None
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind == "power":
            if self.p is None or not 0 <= self.p:
                raise InvalidArgumentError(f"power schedule needs p >= 0, got {self.p}")
        elif self.kind == "constant":
            if self.eta is None or not self.eta > 0:
                raise InvalidArgumentError(f"constant schedule needs eta > 0, got {self.eta}")
        else:
            raise InvalidArgumentError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def power(cls, p: float, scale: float = 1.0) -> "EtaSchedule":
        return cls(kind="power", p=p, scale=scale)

    @classmethod
    def constant(cls, eta: float) -> "EtaSchedule":
        return cls(kind="constant", eta=eta)

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return float(self.eta)
        return self.scale / t ** self.p


@dataclass(frozen=True)
class FeasibilityResult:
    value: float
    b: np.ndarray
    feasible: bool
    inflation: float
    iterations: int
    stationarity: float
    certificate: str = ""


@dataclass
class SolverArtifacts:
    r_star: float
    Z: float
    b_star: np.ndarray
    iterations: int
    S: float | None = None
    s: float | None = None
    q_max: float | None = None
    eps: float | None = None
    residuals: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["b_star"] = [float(v) for v in self.b_star]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SolverArtifacts":
        data = dict(data)
        data["b_star"] = np.asarray(data["b_star"], dtype=np.float64)
        return cls(**data)


@dataclass(frozen=True)
class AmplificationPlan:
    a: float
    b: np.ndarray
    eta: EtaSchedule
    provenance: SolverArtifacts
    label: str = ""

    def __post_init__(self) -> None:
        if not self.a > 0 or not math.isfinite(self.a):
            raise InvalidArgumentError(f"server gain a must be positive, got {self.a}")
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))

    def transmit_config(self, b_max: np.ndarray) -> TransmitConfig:
        return TransmitConfig(a=self.a, b=self.b, b_max=b_max)

    def effective_gain(self, chan: ChannelRealization) -> float:
        return float(np.dot(chan.h, self.b))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "a": self.a,
            "b": [float(v) for v in self.b],
            "eta": asdict(self.eta),
            "provenance": self.provenance.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AmplificationPlan":
        return cls(a=float(data["a"]), b=np.asarray(data["b"], dtype=np.float64),
                   eta=EtaSchedule(**data["eta"]),
                   provenance=SolverArtifacts.from_dict(data["provenance"]),
                   label=data.get("label", ""))


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------

def box_upper(b_max: float | np.ndarray, num_devices: int) -> np.ndarray:
    """Per-device upper bounds from a scalar or a length-K sequence."""
    ub = np.broadcast_to(np.asarray(b_max, dtype=np.float64), (num_devices,)).copy()
    if np.any(ub <= 0) or not np.all(np.isfinite(ub)):
        raise InvalidArgumentError("b_max entries must be positive and finite")
    return ub


def constraint_norm(b: np.ndarray, chan: ChannelRealization) -> float:
    """sqrt(sum_k 4 h_k^2 b_k^2 + N sigma2), convex in b."""
    hb = chan.h * np.asarray(b, dtype=np.float64)
    return math.sqrt(4.0 * float(hb @ hb) + chan.noise_energy)


def objective_ratio(b: np.ndarray, chan: ChannelRealization) -> float:
    """The fractional objective whose minimum over the box is Z."""
    gain = float(np.dot(chan.h, b))
    if gain <= 0:
        return math.inf
    return constraint_norm(b, chan) ** 2 / gain ** 2


# ---------------------------------------------------------------------------
# Feasibility and bisection
# ---------------------------------------------------------------------------

def _gap(v: np.ndarray, r: float, c: float) -> float:
    return math.sqrt(4.0 * float(v @ v) + c) - r * float(v.sum())


def _gap_grad(v: np.ndarray, r: float, c: float) -> np.ndarray:
    root = math.sqrt(4.0 * float(v @ v) + c)
    if root == 0.0:
        return np.full_like(v, -r)
    return 4.0 * v / root - r


def _gap_lower_bound(v: np.ndarray, phi: float, grad: np.ndarray, ub: np.ndarray) -> float:
    """Linearization bound: min over the box of phi(v) + grad . (x - v).

    The linear model is minimized at a vertex, one coordinate at a time.
    Convexity makes this a lower bound on the gap everywhere in the box.
    """
    return phi + float(np.minimum(0.0, np.minimum(-grad * v, grad * (ub - v))).sum())


def _waterfill_minimizer(ub: np.ndarray, c: float) -> np.ndarray:
    """Exact minimizer of (4 sum v^2 + c) / (sum v)^2 over 0 <= v <= ub.

    For a fixed sum the smallest sum of squares in the box is
    v = min(ub, tau). Between consecutive sorted caps the ratio in tau has
    one stationary point, tau0 = (4 Q + c) / (4 A), where A and Q are the
    sum and the sum of squares of the capped entries.
    """
    caps = np.sort(ub)
    K = caps.size
    A = np.concatenate(([0.0], np.cumsum(caps)[:-1]))
    Q = np.concatenate(([0.0], np.cumsum(caps * caps)[:-1]))
    m = (K - np.arange(K)).astype(np.float64)
    lo = np.concatenate(([0.0], caps[:-1]))
    safe_A = np.where(A > 0, A, 1.0)
    tau0 = np.where(A > 0, np.clip((4.0 * Q + c) / (4.0 * safe_A), lo, caps), caps)

    taus = np.concatenate((caps, tau0))
    A2, Q2, m2 = np.tile(A, 2), np.tile(Q, 2), np.tile(m, 2)
    ratios = (4.0 * (Q2 + m2 * taus ** 2) + c) / (A2 + m2 * taus) ** 2
    return np.minimum(ub, taus[int(np.argmin(ratios))])


def _stationarity_tol(tol: float, phi: float, grad: np.ndarray, v: np.ndarray) -> float:
    relative = tol * max(1.0, abs(phi), float(np.max(np.abs(grad))))
    return max(relative, 64.0 * np.finfo(np.float64).eps * max(1.0, float(np.max(v))))


def feasibility_value(r: float, chan: ChannelRealization, b_max: float | np.ndarray,
                      b0: np.ndarray | None = None, tol: float = STATIONARITY_TOL,
                      max_iter: int = MAX_DESCENT_ITERATIONS) -> FeasibilityResult:
    """Decide whether ratio r is achievable within the box.

    Works in the scaled variables v = h b / max(h b_max). The search starts
    at the exact ratio minimizer (or at ``b0`` when given) and descends on
    the convex gap phi_r with projected Barzilai-Borwein steps until one of
    these holds:

    * ``feasible_point``: phi_r(v) <= 0 at an iterate;
    * ``lower_bound``: the linearization bound of phi_r over the box is
      positive, so no point of the box is feasible;
    * ``stationary``: the projected gradient step vanishes relative to the
      scale of phi_r and its gradient, so v minimizes phi_r and phi_r > 0;
    * ``homogeneous``: without noise phi_r is positively homogeneous, and
      its sign at the exact ratio minimizer decides.

    SolverFailure is raised only when ``max_iter`` steps reach none of them.
    The returned ``value`` is ``sqrt(ratio(b)) - r`` at the best iterate.
    ``inflation`` is the box growth needed along the ray through b to
    reach r (negative when there is room to spare).
    """
    if not r > 0 or not math.isfinite(r):
        raise InvalidArgumentError(f"r must be positive, got {r}")
    ub_b = box_upper(b_max, chan.num_devices)
    u_max = chan.h * ub_b
    scale = float(u_max.max())
    ub = u_max / scale
    c = chan.noise_energy / scale ** 2

    best_ratio = _waterfill_minimizer(ub, c)
    if b0 is None:
        v = best_ratio.copy()
    else:
        v = np.clip(chan.h * np.asarray(b0, dtype=np.float64) / scale, 0, ub)
        if v.sum() <= 0:
            v = ub.copy()
    phi = _gap(v, r, c)
    grad = _gap_grad(v, r, c)
    best_v, best_phi = v.copy(), phi
    alpha = 1.0
    stationarity = math.inf
    iterations = 0
    certificate = None

    while True:
        if phi <= 0:
            certificate = "feasible_point"
            break
        if _gap_lower_bound(v, phi, grad, ub) > 0:
            certificate = "lower_bound"
            break
        if c == 0.0 and _gap(best_ratio, r, c) > 0:
            certificate = "homogeneous"
            break
        stationarity = float(np.max(np.abs(np.clip(v - grad, 0, ub) - v)))
        if stationarity <= _stationarity_tol(tol, phi, grad, v):
            certificate = "stationary"
            break
        if iterations >= max_iter:
            break
        step = alpha
        while True:
            candidate = np.clip(v - step * grad, 0, ub)
            cand_phi = _gap(candidate, r, c)
            if cand_phi <= phi + ARMIJO * float(grad @ (candidate - v)) or step < 1e-16:
                break
            step *= 0.5
        new_grad = _gap_grad(candidate, r, c)
        s_vec, y_vec = candidate - v, new_grad - grad
        sy = float(s_vec @ y_vec)
        alpha = min(max(float(s_vec @ s_vec) / sy, 1e-10), 1e10) if sy > 0 else min(2 * step, 1e10)
        v, phi, grad = candidate, cand_phi, new_grad
        iterations += 1
        if v.sum() > 0 and phi < best_phi:
            best_v, best_phi = v.copy(), phi

    if certificate is None:
        raise SolverFailure(
            "feasibility descent did not converge",
            residuals={"r": r, "gap": phi, "stationarity": stationarity, "iterations": iterations})

    feasible = certificate == "feasible_point"
    if not feasible:
        best_v = best_ratio
    # capped coordinates map back to b_max exactly
    b = np.where(best_v >= ub, ub_b, np.minimum(best_v * scale / chan.h, ub_b))
    ratio_root = math.sqrt(objective_ratio(b, chan))
    return FeasibilityResult(
        value=ratio_root - r,
        b=b,
        feasible=feasible,
        inflation=_ray_inflation(b, r, chan, ub_b),
        iterations=iterations,
        stationarity=stationarity,
        certificate=certificate,
    )


def _ray_inflation(b: np.ndarray, r: float, chan: ChannelRealization, ub: np.ndarray) -> float:
    hb = chan.h * b
    A, B = float(hb @ hb), float(hb.sum())
    denom = r * r * B * B - 4.0 * A
    if B <= 0 or denom <= 0:
        return math.inf
    lam = math.sqrt(chan.noise_energy / denom) if chan.noise_energy > 0 else 0.0
    return float(np.max(lam * b - ub))


def solve_Z(chan: ChannelRealization, b_max: float | np.ndarray,
            tol_r: float = 1e-9) -> SolverArtifacts:
    """Bisection on r with a convex feasibility check at every midpoint."""
    if not tol_r > 0:
        raise InvalidArgumentError(f"tol_r must be positive, got {tol_r}")
    ub = box_upper(b_max, chan.num_devices)
    r_lo, r_hi = 0.0, math.sqrt(objective_ratio(ub, chan))
    b_best = ub.copy()  # attains r_hi

    iterations = 0
    descent = 0
    certificates: dict[str, int] = {}
    while r_hi - r_lo > tol_r:
        mid = 0.5 * (r_lo + r_hi)
        result = feasibility_value(mid, chan, ub)
        descent += result.iterations
        certificates[result.certificate] = certificates.get(result.certificate, 0) + 1
        if result.feasible:
            r_hi, b_best = mid, result.b
        else:
            r_lo = mid
        iterations += 1

    Z = objective_ratio(b_best, chan)
    logger.debug("solve_Z: r*=%.12g Z=%.12g after %d bisections (%d descent steps)",
                 r_hi, Z, iterations, descent)
    return SolverArtifacts(
        r_star=r_hi,
        Z=Z,
        b_star=b_best,
        iterations=iterations,
        residuals={"bracket_width": r_hi - r_lo, "r_lo": r_lo, "descent_steps": descent,
                   "certificates": certificates},
    )


def oracle_Z(chan: ChannelRealization, b_max: float | np.ndarray, grid_points: int = 200) -> float:
    """Exhaustive grid minimum of the fractional objective.

    Each axis is ``linspace(0, b_max_k, grid_points + 1)``, so doubling
    ``grid_points`` nests the grids.
    """
    K = chan.num_devices
    if K > ORACLE_MAX_DEVICES:
        raise InvalidArgumentError(f"oracle grid is limited to {ORACLE_MAX_DEVICES} devices, got {K}")
    if grid_points < 1:
        raise InvalidArgumentError("grid_points must be >= 1")
    ub = box_upper(b_max, K)
    axes = [np.linspace(0.0, ub[k], grid_points + 1) * chan.h[k] for k in range(K)]

    # sweep the first axis, vectorize the rest
    rest = np.meshgrid(*axes[1:], indexing="ij") if K > 1 else []
    rest_sq = sum(4.0 * g ** 2 for g in rest) if rest else 0.0
    rest_sum = sum(rest) if rest else 0.0
    best = math.inf
    for u0 in axes[0]:
        num = 4.0 * u0 ** 2 + rest_sq + chan.noise_energy
        den = (u0 + rest_sum) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            vals = np.where(den > 0, num / np.where(den > 0, den, 1.0), math.inf)
        best = min(best, float(np.min(vals)))
    return best


# ---------------------------------------------------------------------------
# Case I: smooth loss, diminishing learning rate
# ---------------------------------------------------------------------------

def _check_p(p: float) -> None:
    if not 0.5 < p < 1:
        raise InvalidArgumentError(f"learning-rate exponent p must satisfy 1/2 < p < 1, got {p}")


def case1_cost(S: float, Z: float, L: float, p: float, deltaF: float) -> float:
    """S * deltaF + (L p / (2p - 1)) * (Z + 1) / S."""
    return S * deltaF + L * p / (2 * p - 1) * (Z + 1) / S


def optimal_S(Z: float, L: float, p: float, deltaF: float) -> float:
    _check_p(p)
    if not (Z > 0 and L > 0 and deltaF > 0):
        raise InvalidArgumentError(f"need Z, L, deltaF > 0, got Z={Z} L={L} deltaF={deltaF}")
    return math.sqrt(L * (Z + 1) * p / ((2 * p - 1) * deltaF))


def plan_case1(chan: ChannelRealization, b_max: float | np.ndarray, task: "TrainingTask",
               p: float, deltaF_estimate: float, *,
               artifacts: SolverArtifacts | None = None) -> AmplificationPlan:
    """b from Z, S from its closed form, and a = 1 / (S sum_k h_k b_k)."""
    _check_p(p)
    constants = task.require_constants()
    solved = artifacts or solve_Z(chan, b_max)
    S = optimal_S(solved.Z, constants.L, p, deltaF_estimate)
    gain = float(np.dot(chan.h, solved.b_star))
    provenance = replace(solved, S=S)
    return AmplificationPlan(a=1.0 / (S * gain), b=solved.b_star, eta=EtaSchedule.power(p),
                             provenance=provenance, label="case1")


# ---------------------------------------------------------------------------
# Case II: strongly convex loss, constant learning rate
# ---------------------------------------------------------------------------

def _floor_scale(Z: float, task: "TrainingTask") -> float:
    """(Z+1) L G^2 / (8 M^2 cos^2 theta_th): the bias floor at s = 0."""
    c = task.require_constants()
    if not c.M > 0:
        raise InvalidArgumentError("Case II needs a strongly convex task (M > 0)")
    return (Z + 1) * c.L * c.G ** 2 / (8 * c.M ** 2 * math.cos(c.theta_th) ** 2)


def eps_from_s(s: float, Z: float, task: "TrainingTask") -> float:
    return _floor_scale(Z, task) * (1 - s)


def s_from_eps(eps: float, Z: float, task: "TrainingTask") -> float:
    floor = _floor_scale(Z, task)
    if not eps > 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps} (it would need s >= 1)")
    s = 1 - eps / floor
    if s <= 0:
        raise InvalidArgumentError(
            f"eps={eps:.6g} is not below the q_max=0 floor {floor:.6g}; "
            f"choose eps < {floor:.6g} or use the q_max=0 plan")
    return s


def case2_qmax_zero_floor(chan: ChannelRealization, b_max: float | np.ndarray,
                          task: "TrainingTask", *,
                          artifacts: SolverArtifacts | None = None) -> float:
    solved = artifacts or solve_Z(chan, b_max)
    return _floor_scale(solved.Z, task)


def _case2_gain(task: "TrainingTask", eta: float, gain: float, s: float) -> float:
    c = task.require_constants()
    return c.G * (1 - s) / (2 * c.M * math.cos(c.theta_th) * eta * gain)


def plan_case2(chan: ChannelRealization, b_max: float | np.ndarray, task: "TrainingTask",
               eta: float, *, s: float | None = None, eps: float | None = None,
               artifacts: SolverArtifacts | None = None) -> AmplificationPlan:
    """Plan for a target contraction ``s`` (= q_max) or a target bias floor ``eps``."""
    if (s is None) == (eps is None):
        raise InvalidArgumentError("give exactly one of s or eps")
    if not eta > 0:
        raise InvalidArgumentError(f"eta must be positive, got {eta}")
    solved = artifacts or solve_Z(chan, b_max)
    if s is None:
        s = s_from_eps(eps, solved.Z, task)
    if not 0 < s < 1:
        raise InvalidArgumentError(f"s must lie in (0, 1), got {s}")
    gain = float(np.dot(chan.h, solved.b_star))
    provenance = replace(solved, s=s, q_max=s, eps=eps_from_s(s, solved.Z, task))
    return AmplificationPlan(a=_case2_gain(task, eta, gain, s), b=solved.b_star,
                             eta=EtaSchedule.constant(eta), provenance=provenance, label="case2")


def plan_case2_qmax_zero(chan: ChannelRealization, b_max: float | np.ndarray,
                         task: "TrainingTask", eta: float, *,
                         artifacts: SolverArtifacts | None = None) -> AmplificationPlan:
    """The boundary plan 2 M cos(theta_th) eta a sum_k h_k b_k = G, where q_max = 0."""
    solved = artifacts or solve_Z(chan, b_max)
    gain = float(np.dot(chan.h, solved.b_star))
    provenance = replace(solved, s=0.0, q_max=0.0, eps=_floor_scale(solved.Z, task))
    return AmplificationPlan(a=_case2_gain(task, eta, gain, 0.0), b=solved.b_star,
                             eta=EtaSchedule.constant(eta), provenance=provenance,
                             label="case2-qmax0")


def plan_unoptimized(chan: ChannelRealization, b_max: float | np.ndarray,
                     reference: AmplificationPlan) -> AmplificationPlan:
    """Every device at full power, with a chosen so a * sum_k b_k matches ``reference``."""
    ub = box_upper(b_max, chan.num_devices)
    a = reference.a * float(reference.b.sum()) / float(ub.sum())
    return AmplificationPlan(a=a, b=ub, eta=reference.eta, provenance=reference.provenance,
                             label=f"{reference.label}-unoptimized")
