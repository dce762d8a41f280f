"""Closed-form right-hand sides of the convergence guarantees, the
stepsize/interval planners derived from them, and bound-vs-empirical
verdicts.

Bound identifiers:
  SC_IID_UBV  strongly convex, identical data, uniform variance bound
  WC_IID_UBV  convex, identical data, uniform variance bound
  SC_IID_FS   strongly convex, identical data, finite-sum sampling
  WC_IID_FS   convex, identical data, finite-sum sampling
  WC_HET_FS   convex, heterogeneous data, finite-sum sampling

The finite-sum guarantees require the almost-sure component smoothness
constant (Problem.L_component), not the smaller global estimate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .simulator import AggregateTrace

# Pure floating-point slack for stepsize admissibility checks: planners are
# allowed to return exactly the limiting value.
_FP_SLACK = 1.0 + 1e-12

THEOREM_IDS = ("SC_IID_UBV", "WC_IID_UBV", "SC_IID_FS", "WC_IID_FS", "WC_HET_FS")


class PreconditionError(ValueError):
    """A hypothesis of the selected statement does not hold for these inputs."""


@dataclass(frozen=True)
class BoundInputs:
    L: float
    gamma: float
    T: int
    H: int
    M: int
    r0_sq: float
    mu: float | None = None
    sigma_sq: float | None = None
    sigma_opt_sq: float | None = None
    sigma_dif_sq: float | None = None

    @property
    def kappa(self) -> float:
        if self.mu is None or self.mu <= 0:
            return float("inf")
        return self.L / self.mu

    def require(self, *names: str) -> None:
        for name in names:
            v = getattr(self, name)
            if v is None or not np.isfinite(v):
                raise PreconditionError(f"bound needs a finite value for {name}")
        for name in ("L", "gamma", "r0_sq"):
            v = getattr(self, name)
            if v is None or not np.isfinite(v) or v < 0:
                raise PreconditionError(f"{name} must be finite and nonnegative")
        if self.T < 1 or self.H < 1 or self.M < 1:
            raise PreconditionError("T, H and M must be >= 1")


@dataclass(frozen=True)
class BoundCurve:
    """Evaluable RHS of one guarantee.

    SC curves are per-step functions of t; WC curves are a single value at
    the final step T. `sync_only` marks guarantees stated only at
    synchronization timestamps. For suboptimality bounds, `convention` names
    the iterate average the statement uses: 'tail' is (1/T) sum_{t=1..T}
    xhat_t and 'head' is (1/T) sum_{t=0..T-1} xhat_t.
    """

    theorem_id: str
    metric: str  # 'dist_sq' or 'subopt'
    inputs: BoundInputs
    sync_only: bool = False
    convention: str | None = None
    notes: str = ""

    def rhs_at(self, t: int) -> float:
        b = self.inputs
        if t < 0 or t > b.T:
            raise ValueError(f"t={t} outside [0, {b.T}]")
        if self.theorem_id == "SC_IID_UBV":
            return ((1.0 - b.gamma * b.mu) ** t * b.r0_sq
                    + b.gamma * b.sigma_sq / (b.mu * b.M)
                    + 2.0 * b.L * b.gamma**2 * (b.H - 1) * b.sigma_sq / b.mu)
        if self.theorem_id == "SC_IID_FS":
            return ((1.0 - b.gamma * b.mu) ** t * b.r0_sq
                    + 2.0 * b.gamma * b.sigma_opt_sq / (b.mu * b.M)
                    + 4.0 * b.sigma_opt_sq * b.gamma**2 * (b.H - 1) * b.L / b.mu)
        if t != b.T:
            raise ValueError(f"{self.theorem_id} bounds only the final average at T={b.T}")
        return self.final()

    def final(self) -> float:
        b = self.inputs
        if self.theorem_id == "WC_IID_UBV":
            return (2.0 * b.r0_sq / (b.gamma * b.T)
                    + 2.0 * b.gamma * b.sigma_sq / b.M
                    + 4.0 * b.gamma**2 * b.L * b.sigma_sq * (b.H - 1))
        if self.theorem_id == "WC_IID_FS":
            return (10.0 * b.r0_sq / (b.gamma * b.T)
                    + 20.0 * b.gamma * b.sigma_opt_sq / b.M
                    + 40.0 * b.gamma**2 * b.L * b.sigma_opt_sq * (b.H - 1))
        if self.theorem_id == "WC_HET_FS":
            return (4.0 * b.r0_sq / (b.gamma * b.T)
                    + 20.0 * b.gamma * b.sigma_dif_sq / b.M
                    + 16.0 * b.gamma**2 * b.L * (b.H - 1) ** 2 * b.sigma_dif_sq)
        return self.rhs_at(self.inputs.T)


def _check_gamma(gamma: float, limit: float, what: str) -> None:
    if gamma > limit * _FP_SLACK:
        raise PreconditionError(
            f"stepsize {gamma!r} violates {what} (limit {limit!r})")


def bound_sc_identical_ubv(b: BoundInputs) -> BoundCurve:
    """Distance bound for strongly convex identical data under a uniform
    variance bound: contraction plus a gamma*sigma^2/(mu*M) floor plus the
    2*L*gamma^2*(H-1)*sigma^2/mu drift term."""
    b.require("mu", "sigma_sq")
    if b.mu <= 0:
        raise PreconditionError("SC_IID_UBV needs mu > 0")
    _check_gamma(b.gamma, 1.0 / (4.0 * b.L), "gamma <= 1/(4L)")
    return BoundCurve("SC_IID_UBV", "dist_sq", b)


def bound_wc_identical_ubv(b: BoundInputs) -> BoundCurve:
    """Suboptimality of the averaged iterate (t = 1..T) for convex identical
    data under a uniform variance bound."""
    b.require("sigma_sq")
    _check_gamma(b.gamma, 1.0 / (4.0 * b.L), "gamma <= 1/(4L)")
    return BoundCurve("WC_IID_UBV", "subopt", b, convention="tail")


def bound_sc_identical_fs(b: BoundInputs) -> BoundCurve:
    """Distance bound for strongly convex identical data with finite-sum
    sampling; stated only at synchronization timestamps."""
    b.require("mu", "sigma_opt_sq")
    if b.mu <= 0:
        raise PreconditionError("SC_IID_FS needs mu > 0")
    limit = min(1.0 / (4.0 * b.L * (1.0 + 2.0 / b.M)),
                1.0 / (b.mu + 8.0 * b.L * (b.H - 1)))
    _check_gamma(b.gamma, limit, "gamma <= min{1/(4L(1+2/M)), 1/(mu+8L(H-1))}")
    return BoundCurve("SC_IID_FS", "dist_sq", b, sync_only=True)


def bound_wc_identical_fs(b: BoundInputs) -> BoundCurve:
    """Suboptimality of the averaged iterate (t = 1..T) for convex identical
    data with finite-sum sampling; T must be a synchronization timestamp."""
    b.require("sigma_opt_sq")
    if b.M < 2:
        raise PreconditionError("WC_IID_FS needs M >= 2")
    _check_gamma(b.gamma, 1.0 / (10.0 * b.L * b.H), "gamma <= 1/(10LH)")
    return BoundCurve("WC_IID_FS", "subopt", b, sync_only=True, convention="tail")


def bound_wc_heterogeneous(b: BoundInputs) -> BoundCurve:
    """Suboptimality of the averaged iterate (t = 0..T-1) for convex
    heterogeneous data with finite-sum sampling.

    The stepsize hypothesis is read as gamma <= min{1/(4L), 1/(8L(H-1))};
    at H = 1 the second constraint is vacuous.
    """
    b.require("sigma_dif_sq")
    if b.M < 2:
        raise PreconditionError("WC_HET_FS needs M >= 2")
    limit = 1.0 / (4.0 * b.L)
    if b.H > 1:
        limit = min(limit, 1.0 / (8.0 * b.L * (b.H - 1)))
    _check_gamma(b.gamma, limit, "gamma <= min{1/(4L), 1/(8L(H-1))}")
    return BoundCurve(
        "WC_HET_FS", "subopt", b, sync_only=True, convention="head",
        notes="stepsize condition read as min{1/(4L), 1/(8L(H-1))}",
    )


# ---------------------------------------------------------------------------
# Planners
# ---------------------------------------------------------------------------

PLAN_H_RULES = ("sc-identical", "wc-identical", "wc-heterogeneous")


def plan_H(rule: str, T: int, M: int, kappa: float | None = None) -> int:
    """Largest synchronization interval that keeps the matching rate.

    sc-identical: 1 + floor(T / (kappa M)); wc-identical:
    1 + floor(sqrt(T) M^{-3/2}); wc-heterogeneous: 1 + floor(T^{1/4} M^{-3/4}).
    """
    if T < 1 or M < 1:
        raise ValueError("T and M must be >= 1")
    if rule == "sc-identical":
        if kappa is None or kappa <= 0:
            raise ValueError("sc-identical rule needs kappa > 0")
        return 1 + math.floor(T / (kappa * M))
    if rule == "wc-identical":
        return 1 + math.floor(math.sqrt(T) / M**1.5)
    if rule == "wc-heterogeneous":
        return 1 + math.floor(T**0.25 / M**0.75)
    raise ValueError(f"unknown plan_H rule {rule!r}; expected one of {PLAN_H_RULES}")


class PlannedGamma(NamedTuple):
    gamma: float
    rule: str
    precondition: str  # the theorem hypothesis this stepsize satisfies
    suggested_T: int | None = None


GAMMA_RULES = ("sc-identical-ubv", "wc-identical-ubv", "sc-identical-fs", "wc-identical-fs", "wc-heterogeneous")


def plan_gamma(rule: str, L: float, mu: float | None = None,
               M: int | None = None, T: int | None = None,
               H: int | None = None, t_param: float | None = None) -> PlannedGamma:
    """Rate-matching stepsize for each guarantee, hypotheses asserted.

    sc-identical-ubv: gamma = 1/(mu a) with a = 4 kappa + t for t > 0.
    wc-identical-ubv: gamma = sqrt(M)/(4 L sqrt(T)), needs T >= M.
    sc-identical-fs: gamma = 1/(mu a) with a = 18 kappa t, needs H <= t.
    wc-identical-fs: gamma = sqrt(M)/(10 L sqrt(T)), needs H <= sqrt(T/M).
    wc-heterogeneous: gamma = sqrt(M)/(8 L sqrt(T)), needs H <= sqrt(T/M).
    Pass the almost-sure component L for the three finite-sum rules.

    The strongly convex rules also prescribe a step count proportional to
    a log a, which is non-integral; suggested_T rounds it up.
    """
    if L <= 0:
        raise PreconditionError("L must be positive")
    if rule == "sc-identical-ubv":
        if mu is None or mu <= 0:
            raise PreconditionError(f"{rule} needs mu > 0")
        if t_param is None or t_param <= 0:
            raise PreconditionError(f"{rule} needs t_param > 0")
        a = 4.0 * (L / mu) + t_param
        gamma = 1.0 / (mu * a)
        pre = "gamma <= 1/(4L)"
        _check_gamma(gamma, 1.0 / (4.0 * L), pre)
        return PlannedGamma(gamma, rule, pre, math.ceil(2.0 * a * math.log(a)))
    if rule == "wc-identical-ubv":
        if M is None or T is None or T < M:
            raise PreconditionError(f"{rule} needs T >= M")
        gamma = math.sqrt(M) / (4.0 * L * math.sqrt(T))
        pre = "gamma <= 1/(4L)"
        _check_gamma(gamma, 1.0 / (4.0 * L), pre)
        return PlannedGamma(gamma, rule, pre)
    if rule == "sc-identical-fs":
        if mu is None or mu <= 0:
            raise PreconditionError(f"{rule} needs mu > 0")
        if t_param is None or t_param <= 0:
            raise PreconditionError(f"{rule} needs t_param > 0")
        if H is None or M is None or H > t_param:
            raise PreconditionError(f"{rule} needs H <= t_param")
        a = 18.0 * (L / mu) * t_param
        gamma = 1.0 / (mu * a)
        pre = "gamma <= min{1/(4L(1+2/M)), 1/(mu+8L(H-1))}"
        limit = min(1.0 / (4.0 * L * (1.0 + 2.0 / M)),
                    1.0 / (mu + 8.0 * L * (H - 1)))
        _check_gamma(gamma, limit, pre)
        return PlannedGamma(gamma, rule, pre, math.ceil(18.0 * a * math.log(a)))
    if rule == "wc-identical-fs":
        if M is None or T is None or H is None or H > math.sqrt(T / M):
            raise PreconditionError(f"{rule} needs H <= sqrt(T/M)")
        gamma = math.sqrt(M) / (10.0 * L * math.sqrt(T))
        pre = "gamma <= 1/(10LH)"
        _check_gamma(gamma, 1.0 / (10.0 * L * H), pre)
        return PlannedGamma(gamma, rule, pre)
    if rule == "wc-heterogeneous":
        if M is None or T is None or H is None or H > math.sqrt(T / M):
            raise PreconditionError(f"{rule} needs H <= sqrt(T/M)")
        gamma = math.sqrt(M) / (8.0 * L * math.sqrt(T))
        pre = "gamma <= min{1/(4L), 1/(8L(H-1))}"
        limit = 1.0 / (4.0 * L)
        if H > 1:
            limit = min(limit, 1.0 / (8.0 * L * (H - 1)))
        _check_gamma(gamma, limit, pre)
        return PlannedGamma(gamma, rule, pre)
    raise ValueError(f"unknown plan_gamma rule {rule!r}; expected one of {GAMMA_RULES}")


# ---------------------------------------------------------------------------
# Bound-vs-empirical verdicts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Verdict:
    holds: bool
    margin: float  # min over compared points of (bound - empirical mean)
    slack_ratio: float  # max over compared points of empirical / bound
    compared: int
    details: str

    def to_kv_text(self) -> str:
        return (f"holds = {self.holds}\nmargin = {self.margin!r}\n"
                f"slack_ratio = {self.slack_ratio!r}\ncompared = {self.compared}\n"
                f"details = {self.details}\n")


def _verdict(emp: np.ndarray, se: np.ndarray, rhs: np.ndarray,
             details: str) -> Verdict:
    ok = emp <= rhs + 3.0 * se
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(rhs > 0, emp / rhs, np.inf)
    return Verdict(
        holds=bool(np.all(ok)),
        margin=float(np.min(rhs - emp)),
        slack_ratio=float(np.max(ratios)),
        compared=int(emp.size),
        details=details,
    )


def check_bound(curve: BoundCurve, agg: AggregateTrace) -> Verdict:
    """Is the empirical mean below the RHS (plus 3 standard errors) wherever
    the guarantee speaks?

    Distance bounds are compared at every comparable recorded step (all of
    them, or only synchronization steps for sync-only statements);
    suboptimality bounds are compared once at T using the iterate-average
    convention the statement defines.
    """
    T = curve.inputs.T
    if int(agg.t[-1]) != T:
        raise ValueError(f"trace ends at {int(agg.t[-1])}, bound is for T={T}")
    if curve.metric == "dist_sq":
        mask = agg.synced if curve.sync_only else np.ones(agg.t.size, dtype=bool)
        if not np.any(mask):
            raise ValueError("no comparable steps recorded")
        ts = agg.t[mask]
        emp = agg.mean["dist_sq"][mask]
        se = agg.se["dist_sq"][mask]
        rhs = np.asarray([curve.rhs_at(int(t)) for t in ts])
        return _verdict(emp, se, rhs,
                        f"{curve.theorem_id}: dist_sq at {ts.size} steps")
    if curve.metric == "subopt":
        if curve.sync_only and not bool(agg.synced[-1]):
            raise ValueError("T is not a synchronization timestamp")
        if curve.convention == "tail":
            emp, se = agg.bar_subopt_tail
        elif curve.convention == "head":
            emp, se = agg.bar_subopt_head
        else:
            raise ValueError(f"unknown averaging convention {curve.convention!r}")
        rhs = curve.final()
        return _verdict(np.asarray([emp]), np.asarray([se]), np.asarray([rhs]),
                        f"{curve.theorem_id}: f(bar x_T) - f* at T={T} "
                        f"({curve.convention} average)")
    raise ValueError(f"unknown metric {curve.metric!r}")


def check_vt_bound(agg: AggregateTrace, gamma: float, H: int,
                   sigma_sq: float, L: float | None = None) -> Verdict:
    """Iterate-deviation bound for identical data: mean V_t <= (H-1) gamma^2
    sigma^2 + 3 SE at every recorded step; requires gamma <= 1/(2L)."""
    if L is not None:
        _check_gamma(gamma, 1.0 / (2.0 * L), "gamma <= 1/(2L)")
    rhs = np.full(agg.t.size, (H - 1) * gamma**2 * sigma_sq)
    return _verdict(agg.mean["V"], agg.se["V"], rhs,
                    f"V_t <= (H-1) gamma^2 sigma^2 at {agg.t.size} steps")


def check_grad_norm_bound(agg: AggregateTrace, L: float, M: int,
                          sigma_dif_sq: float) -> Verdict:
    """Heterogeneous averaged-gradient bound: mean ||g_t||^2 <= 2 L^2 V_t
    + 8 L (f(xhat_t) - f*) + 4 sigma_dif^2 / M, compared at recorded steps
    with gradients; L is the almost-sure component constant.

    The RHS is itself estimated from the trace, so its standard errors are
    added to the slack alongside the LHS one.
    """
    has_grad = ~np.isnan(agg.mean["grad_norm_sq"])
    if not np.any(has_grad):
        raise ValueError("trace has no recorded gradient norms")
    emp = agg.mean["grad_norm_sq"][has_grad]
    rhs = (2.0 * L**2 * agg.mean["V"][has_grad]
           + 8.0 * L * agg.mean["subopt"][has_grad]
           + 4.0 * sigma_dif_sq / M)
    se = (agg.se["grad_norm_sq"][has_grad]
          + 2.0 * L**2 * agg.se["V"][has_grad]
          + 8.0 * L * agg.se["subopt"][has_grad])
    return _verdict(emp, se, rhs,
                    f"||g_t||^2 bound at {int(has_grad.sum())} steps")
