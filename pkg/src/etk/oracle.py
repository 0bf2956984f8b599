"""Inexact first-order oracles built from approximate inner solves.

An oracle is a callable ``oracle(y, delta=None) -> InexactOracleReply``. The
reply carries a value ``F`` and vector ``G`` satisfying, for all probes ``y'``,

    0 <= f(y') - F - <G, y' - y> <= lipschitz/2 * ||y' - y||^2 + delta.

Inner solvers are plain callables ``inner(y, delta) -> InnerSolution``; the
wrapper below turns their certified output into replies with the matching
constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Literal, Protocol

import numpy as np

from .core_ot import DualPotentials, TransportPlan, marginal_residual
from .exceptions import ToleranceNotReached

__all__ = [
    "InexactOracleReply",
    "OracleConstants",
    "InnerSolution",
    "StopDecision",
    "holder_smoothing_constant",
    "certificate_holds",
    "inner_stop_criterion",
    "make_inexact_oracle",
    "exact_oracle",
    "check_oracle_inequality",
    "OracleCheck",
    "delta_schedule",
]

Provenance = Literal["proposition2", "proposition3", "holder_embedding", "user"]


@dataclass(frozen=True)
class OracleConstants:
    delta: float
    lipschitz: float | None
    provenance: Provenance = "user"

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.lipschitz is not None and not self.lipschitz > 0:
            raise ValueError("lipschitz must be positive")


@dataclass(frozen=True)
class InexactOracleReply:
    F: float
    G: np.ndarray
    delta: float = 0.0
    lipschitz: float | None = None
    info: dict = field(default_factory=dict, compare=False, repr=False)


class Oracle(Protocol):
    def __call__(self, y: np.ndarray, delta: float | None = None) -> InexactOracleReply: ...


@dataclass
class InnerSolution:
    """Output of an inner solver at one outer point.

    ``sense`` says whether the outer function is a minimum (``"min"``) or a
    maximum (``"max"``) of the inner objective over the inner variable. For
    ``"max"`` the inner objective at any inner point is already a lower bound
    and no offset is applied.
    """

    value: float
    grad: np.ndarray
    sense: Literal["min", "max"] = "min"
    certified: bool = True
    exact_feasible: bool = False
    lipschitz: float | None = None
    residuals: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def holder_smoothing_constant(L_nu: float, nu: float, delta: float) -> float:
    """Curvature constant that makes a Hölder-gradient function a (delta, L) problem.

    ``L = L_nu * (L_nu * (1 - nu) / (2 * delta * (1 + nu))) ** ((1 - nu) / (1 + nu))``
    """
    if not 0.0 <= nu <= 1.0:
        raise ValueError(f"nu must lie in [0, 1], got {nu}")
    if not delta > 0:
        raise ValueError("delta must be positive")
    if not L_nu > 0:
        raise ValueError("L_nu must be positive")
    if nu == 1.0:
        return float(L_nu)
    expo = (1.0 - nu) / (1.0 + nu)
    return float(L_nu * (L_nu * (1.0 - nu) / (2.0 * delta * (1.0 + nu))) ** expo)


def delta_schedule(eps: float, p: int, k: int, factor: float = 0.1) -> float:
    """Inner accuracy requested at outer iteration ``k``."""
    if p == 0:
        return factor * eps
    return factor * eps / (k + 1)


# ---------------------------------------------------------------------------
# inner stopping


def certificate_holds(residual: float, dual_norm: float, delta: float) -> bool:
    return residual * dual_norm <= delta / 2 and residual <= delta


@dataclass(frozen=True)
class StopDecision:
    satisfied: bool
    residual: float
    residual_times_norm: float
    dual_norm: float

    def __bool__(self) -> bool:
        return self.satisfied


def inner_stop_criterion(
    duals: DualPotentials,
    plan: TransportPlan | None,
    L,
    W,
    delta: float,
    *,
    cost=None,
    gamma: float | None = None,
) -> StopDecision:
    """Residual-based certificate for stopping the inner balancing loop.

    Holds when ``||Ax - b|| * ||(lam, mu)|| <= delta/2`` and
    ``||Ax - b|| <= delta``. The dual norm is taken on the zero-mean
    representative. If ``cost`` is given the plan is rebuilt from ``duals``.
    """
    if cost is not None:
        from .core_ot import plan_from_duals

        if gamma is None:
            gamma = plan.gamma if plan is not None else 1.0
        plan = plan_from_duals(duals, cost, gamma)
    if plan is None:
        raise ValueError("need either a plan or a cost matrix")
    _, _, res = marginal_residual(plan, L, W)
    norm = duals.norm()
    return StopDecision(certificate_holds(res, norm, delta), res, res * norm, norm)


# ---------------------------------------------------------------------------
# oracle construction


def make_inexact_oracle(
    inner: Callable[[np.ndarray, float], InnerSolution],
    delta: float,
    *,
    path: Literal["smooth", "subgradient"] = "smooth",
    lipschitz: float | None = None,
    subgradient_bound: float | None = None,
) -> Callable[..., InexactOracleReply]:
    """Wrap a certified inner solver as a (delta, L) oracle.

    ``path="smooth"`` treats the inner objective as jointly smooth with
    constant ``lipschitz`` and returns ``(value - 2 delta, grad)`` with
    constants ``(6 delta, 2 lipschitz)``. ``path="subgradient"`` only trusts the
    gradient as a delta-subgradient; the curvature constant then comes from
    the Hölder embedding at ``nu = 0`` with ``subgradient_bound`` and the
    additive constant is ``3 delta``. An inner solve that reports an exactly
    feasible primal point with a known constant is passed through with
    ``(delta, lipschitz)``.

    The returned callable accepts an optional per-call ``delta`` that
    overrides the default.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    default_delta = float(delta)

    def oracle(y, delta: float | None = None) -> InexactOracleReply:
        d = default_delta if delta is None else float(delta)
        y = np.asarray(y, dtype=float)
        sol = inner(y, d)
        if not sol.certified:
            raise ToleranceNotReached(
                f"inner solve at delta={d:.3e} did not certify", **sol.residuals
            )
        offset = 2.0 * d if sol.sense == "min" else 0.0
        if sol.exact_feasible and sol.lipschitz is not None:
            const = OracleConstants(d, sol.lipschitz, "proposition2")
        elif path == "smooth":
            L_joint = sol.lipschitz if sol.lipschitz is not None else lipschitz
            const = OracleConstants(6.0 * d, None if L_joint is None else 2.0 * L_joint,
                                    "proposition3")
        elif path == "subgradient":
            L_h = (holder_smoothing_constant(subgradient_bound, 0.0, d)
                   if subgradient_bound is not None else None)
            const = OracleConstants(3.0 * d, L_h, "holder_embedding")
        else:
            raise ValueError(f"unknown oracle path {path!r}")
        info = dict(sol.info)
        info.update(residuals=sol.residuals, provenance=const.provenance, requested_delta=d)
        return InexactOracleReply(
            float(sol.value - offset),
            np.asarray(sol.grad, dtype=float),
            const.delta,
            const.lipschitz,
            info,
        )

    return oracle


def exact_oracle(f: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                 lipschitz: float | None = None) -> Callable[..., InexactOracleReply]:
    """Oracle for a function with an exactly computable value and (sub)gradient."""

    def oracle(y, delta: float | None = None) -> InexactOracleReply:
        y = np.asarray(y, dtype=float)
        return InexactOracleReply(float(f(y)), np.asarray(grad(y), dtype=float), 0.0, lipschitz)

    return oracle


# ---------------------------------------------------------------------------
# empirical check of the two-sided bound


@dataclass(frozen=True)
class OracleCheck:
    pass_fraction: float
    worst_violation: float
    lower_pass: float
    upper_pass: float


def check_oracle_inequality(
    oracle,
    f_reference: Callable[[np.ndarray], float],
    region: tuple,
    samples: int = 1000,
    *,
    delta: float | None = None,
    lipschitz: float | None = None,
    rng: np.random.Generator | int | None = None,
    atol: float = 1e-12,
) -> OracleCheck:
    """Sample pairs ``(y, y')`` from a box and test both sides of the bound.

    ``region`` is ``(lower, upper)``, each broadcastable to the point
    dimension. Constants default to those reported by the oracle. A pair
    passes when both inequalities hold up to ``atol``; the worst violation is
    the largest amount by which either side fails.
    """
    rng = np.random.default_rng(rng)
    lo = np.atleast_1d(np.asarray(region[0], dtype=float))
    hi = np.atleast_1d(np.asarray(region[1], dtype=float))
    lo, hi = np.broadcast_arrays(lo, hi)
    lower_ok = upper_ok = both_ok = 0
    worst = 0.0
    for _ in range(samples):
        y = rng.uniform(lo, hi)
        y2 = rng.uniform(lo, hi)
        r = oracle(y)
        d = r.delta if delta is None else delta
        Lc = r.lipschitz if lipschitz is None else lipschitz
        if Lc is None:
            raise ValueError("oracle reported no curvature constant; pass lipschitz explicitly")
        step = y2 - y
        gap = f_reference(y2) - r.F - float(r.G @ step)
        upper = 0.5 * Lc * float(step @ step) + d
        lv = max(0.0, -gap)
        uv = max(0.0, gap - upper)
        worst = max(worst, lv, uv)
        lo_pass = lv <= atol
        up_pass = uv <= atol
        lower_ok += lo_pass
        upper_ok += up_pass
        both_ok += lo_pass and up_pass
    return OracleCheck(both_ok / samples, worst, lower_ok / samples, upper_ok / samples)
