"""Transport equilibrium: an outer convex problem over network parameters.

For parameters ``y`` in a box ``Q = {y >= lower}`` the outer objective is

    f(y) = min_{lam, mu} lse(-c(y) + lam_i + mu_j) - <lam, L> - <mu, W> - g(y),

where ``lse`` is the log-sum-exp over all ``n^2`` cells, the costs
``c_ij(y) >= 0`` are concave and ``g`` is concave. The inner minimum equals
minus the unit-entropy transport value, so ``f`` is convex. Its gradient
follows from the inner minimiser alone:

    grad f(y) = -sum_ij x_ij grad c_ij(y) - grad g(y),

with ``x`` the softmax plan. Additive shifts of ``lam`` or ``mu`` leave ``x``
and therefore the gradient unchanged.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core_ot import (
    DualPotentials,
    StoppingRule,
    TransportPlan,
    as_cost,
    check_marginals,
    logsumexp,
    plan_from_duals,
    solve_entropic_ot,
)
from .exceptions import ToleranceNotReached
from .oracle import InexactOracleReply, InnerSolution, make_inexact_oracle
from .universal_gd import ProxSetup, RunHistory, universal_method

__all__ = [
    "CostModel",
    "ToyCostModel",
    "FeasibleSet",
    "EquilibriumReport",
    "COST_MODELS",
    "register_cost_model",
    "build_cost_model",
    "inner_objective",
    "danskin_gradient",
    "f_oracle",
    "f_value",
    "solve_equilibrium",
    "toy_cost_model",
]

DEFAULT_MAX_INNER = 200_000


class CostModel(ABC):
    """Concave cost and utility terms of the outer problem.

    Subclasses provide ``c(y)``, its per-cell gradients, ``g(y)`` and its
    gradient. ``smooth`` says whether the gradients are Lipschitz; it selects
    the accelerated method and the oracle constants.
    """

    n: int
    dim: int
    smooth: bool = True

    @abstractmethod
    def cost(self, y: np.ndarray) -> np.ndarray:
        """``(n, n)`` cost matrix at ``y``."""

    @abstractmethod
    def cost_grad(self, y: np.ndarray) -> np.ndarray:
        """``(n, n, dim)`` array of (super)gradients of each ``c_ij``."""

    @abstractmethod
    def g(self, y: np.ndarray) -> float: ...

    @abstractmethod
    def g_grad(self, y: np.ndarray) -> np.ndarray: ...

    def joint_lipschitz(self) -> float | None:
        """Lipschitz constant of the inner objective's gradient in ``(lam, mu, y)``, if known."""
        return None

    def subgradient_bound(self) -> float | None:
        """Bound on the norm of outer subgradients, for nonsmooth models."""
        return None


@dataclass
class ToyCostModel(CostModel):
    """Affine costs ``c0 + <s_ij, y>`` and quadratic utility ``-(beta/2)||y - y_hat||^2``."""

    base: np.ndarray
    sensitivities: np.ndarray
    beta: float
    y_hat: np.ndarray
    smooth: bool = True

    def __post_init__(self) -> None:
        self.base = as_cost(self.base)
        self.n = self.base.shape[0]
        s = np.asarray(self.sensitivities, dtype=float)
        if s.ndim == 2 and s.shape == (self.n, self.n):
            s = s[:, :, None]
        if s.ndim != 3 or s.shape[:2] != (self.n, self.n):
            raise ValueError(f"sensitivities must have shape (n, n, d); got {s.shape}")
        if np.any(s < 0):
            i, j, k = np.argwhere(s < 0)[0]
            raise ValueError(f"sensitivity ({i}, {j}, {k}) is negative: {s[i, j, k]}")
        self.sensitivities = s
        self.dim = s.shape[2]
        self.y_hat = np.broadcast_to(np.asarray(self.y_hat, dtype=float), (self.dim,)).copy()
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        self.beta = float(self.beta)

    def cost(self, y):
        return self.base + self.sensitivities @ np.asarray(y, dtype=float)

    def cost_grad(self, y):
        return self.sensitivities

    def g(self, y):
        d = np.asarray(y, dtype=float) - self.y_hat
        return -0.5 * self.beta * float(d @ d)

    def g_grad(self, y):
        return -self.beta * (np.asarray(y, dtype=float) - self.y_hat)

    def joint_lipschitz(self) -> float:
        # the log-sum-exp Hessian is dominated by the identity, so the
        # composite with the affine map has constant ||A||^2
        n, d = self.n, self.dim
        A = np.zeros((n * n, 2 * n + d))
        rows = np.arange(n * n)
        A[rows, rows // n] = 1.0
        A[rows, n + rows % n] = 1.0
        A[:, 2 * n:] = -self.sensitivities.reshape(n * n, d)
        return float(np.linalg.norm(A, 2) ** 2 + self.beta)


def toy_cost_model(base, sensitivities, beta: float, y_hat) -> ToyCostModel:
    """Affine-cost, quadratic-utility model; smooth and concave."""
    return ToyCostModel(base, sensitivities, beta, y_hat)


# ---------------------------------------------------------------------------
# registry used by the command line


COST_MODELS: dict[str, Callable[[dict], CostModel]] = {}


def register_cost_model(name: str, factory: Callable[[dict], CostModel]) -> None:
    """Make ``factory(config) -> CostModel`` available under ``name``."""
    if name in COST_MODELS:
        raise ValueError(f"cost model {name!r} is already registered")
    COST_MODELS[name] = factory


def build_cost_model(name: str, config: dict) -> CostModel:
    try:
        factory = COST_MODELS[name]
    except KeyError:
        known = ", ".join(sorted(COST_MODELS))
        raise ValueError(f"unknown cost model {name!r}; known: {known}") from None
    return factory(config)


def _toy_from_config(cfg: dict) -> CostModel:
    base = np.asarray(cfg["base"], dtype=float)
    n = base.shape[0]
    if "sensitivities" in cfg:
        s = cfg["sensitivities"]
    else:
        s = np.zeros((n, n, len(cfg.get("y_hat", [0.0]))))
    return toy_cost_model(base, s, cfg.get("beta", 1.0), cfg.get("y_hat", 0.0))


def _constant_from_config(cfg: dict) -> CostModel:
    base = np.asarray(cfg["base"], dtype=float)
    y_hat = np.atleast_1d(np.asarray(cfg.get("y_hat", 0.0), dtype=float))
    n = base.shape[0]
    return toy_cost_model(base, np.zeros((n, n, y_hat.size)), cfg.get("beta", 1.0), y_hat)


register_cost_model("toy", _toy_from_config)
register_cost_model("constant", _constant_from_config)


# ---------------------------------------------------------------------------
# feasible set and report


@dataclass(frozen=True)
class FeasibleSet:
    lower: np.ndarray

    def __post_init__(self) -> None:
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        if lower.ndim != 1 or np.any(np.isnan(lower)) or np.any(lower == np.inf):
            raise ValueError("lower bounds must be a vector of reals (or -inf)")
        object.__setattr__(self, "lower", lower)

    @property
    def dim(self) -> int:
        return self.lower.size

    def project(self, y) -> np.ndarray:
        return np.maximum(self.lower, np.asarray(y, dtype=float))

    def default_start(self) -> np.ndarray:
        return np.maximum(self.lower, 0.0)


@dataclass
class EquilibriumReport:
    y: np.ndarray
    f: float
    plan: TransportPlan
    duals: DualPotentials
    outer_iterations: int
    inner_iterations: int
    converged: bool
    history: RunHistory | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# oracle


def inner_objective(duals: DualPotentials, cost, L, W) -> float:
    """``lse(-c + lam_i + mu_j) - <lam, L> - <mu, W>``; an upper bound on the inner minimum."""
    logits = duals.lam[:, None] + duals.mu[None, :] - np.asarray(cost, dtype=float)
    return float(logsumexp(logits) - duals.lam @ L - duals.mu @ W)


def danskin_gradient(plan: TransportPlan | np.ndarray, model: CostModel, y) -> np.ndarray:
    """``-sum_ij x_ij grad c_ij(y) - grad g(y)`` for the given plan."""
    x = plan.entries if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    y = np.asarray(y, dtype=float)
    Dc = np.asarray(model.cost_grad(y), dtype=float)
    # fixed contraction order keeps the reduction deterministic
    return -np.tensordot(x, Dc, axes=([0, 1], [0, 1])) - np.asarray(model.g_grad(y), dtype=float)


def _inner_solver(model: CostModel, L, W, max_inner: int, cache: dict | None):
    def inner(y, delta) -> InnerSolution:
        c = model.cost(y)
        if np.any(c < 0):
            i, j = np.argwhere(c < 0)[0]
            raise ValueError(f"cost ({i}, {j}) is negative at y={y}")
        init = cache.get("duals") if cache is not None else None
        rep = solve_entropic_ot(c, L, W, 1.0, StoppingRule("certificate", delta, max_inner), init=init)
        if cache is not None and rep.converged:
            cache["duals"] = rep.duals
        value = inner_objective(rep.duals, c, L, W) - model.g(y)
        return InnerSolution(
            value,
            danskin_gradient(rep.plan, model, y),
            sense="min",
            certified=rep.converged,
            residuals={"residual": rep.marginal_residual, "iterations": rep.iterations},
            info={"inner_iterations": rep.iterations, "plan": rep.plan, "duals": rep.duals},
        )

    return inner


def _make_oracle(model: CostModel, L, W, delta: float, max_inner: int, cache: dict | None):
    inner = _inner_solver(model, L, W, max_inner, cache)
    if model.smooth:
        return make_inexact_oracle(inner, delta, path="smooth", lipschitz=model.joint_lipschitz())
    return make_inexact_oracle(inner, delta, path="subgradient",
                               subgradient_bound=model.subgradient_bound())


def f_oracle(y, model: CostModel, L, W, delta: float, *,
             max_inner: int = DEFAULT_MAX_INNER) -> InexactOracleReply:
    """Inexact value and Danskin gradient of the outer objective at ``y``.

    The inner balancing loop stops on the residual certificate at ``delta``.
    The value is the inner objective at the certified potentials minus
    ``2 delta``. ``info`` carries the plan, potentials and inner iteration
    count.

    Raises
    ------
    ToleranceNotReached
        If balancing cannot certify ``delta`` within ``max_inner`` sweeps.
    """
    L, W = check_marginals(L, W)
    oracle = _make_oracle(model, L, W, delta, max_inner, None)
    return oracle(np.asarray(y, dtype=float))


def f_value(y, model: CostModel, L, W, tol: float = 1e-12, *, max_inner: int = DEFAULT_MAX_INNER) -> float:
    """Outer objective to high accuracy (no offset), for checks and reporting."""
    L, W = check_marginals(L, W)
    c = model.cost(np.asarray(y, dtype=float))
    rep = solve_entropic_ot(c, L, W, 1.0, StoppingRule("certificate", tol, max_inner))
    if not rep.converged:
        raise ToleranceNotReached(
            f"balancing at y={y} stopped at residual {rep.marginal_residual:.3e}",
            residual=rep.marginal_residual,
            iterations=rep.iterations,
        )
    return inner_objective(rep.duals, c, L, W) - model.g(y)


def solve_equilibrium(
    model: CostModel,
    L,
    W,
    Q: FeasibleSet,
    eps: float,
    p: int | None = None,
    *,
    y0=None,
    max_iter: int = 10_000,
    max_inner: int = DEFAULT_MAX_INNER,
    callback=None,
) -> EquilibriumReport:
    """Minimise the outer objective over the box ``Q``.

    Parameters
    ----------
    model : CostModel
    L, W : array
        Marginals; totals must agree to 1e-9.
    Q : FeasibleSet
    eps : float
        Target accuracy of the outer certificate.
    p : {0, 1}, optional
        Defaults to 1 for smooth models and 0 otherwise.
    y0 : array, optional
        Start; defaults to ``max(lower, 0)``.

    Notes
    -----
    Inner solves are warm-started from the last certified potentials, and
    ``inner_iterations`` in the report counts every balancing sweep.
    """
    L, W = check_marginals(L, W)
    if Q.dim != model.dim:
        raise ValueError(f"feasible set has dimension {Q.dim}, model expects {model.dim}")
    if p is None:
        p = 1 if model.smooth else 0
    start = Q.default_start() if y0 is None else Q.project(y0)
    cache: dict = {}
    oracle = _make_oracle(model, L, W, 0.1 * eps, max_inner, cache)
    inner_total = 0

    def counting(y, delta=None):
        nonlocal inner_total
        r = oracle(y, delta)
        inner_total += r.info["inner_iterations"]
        return r

    y, hist = universal_method(counting, ProxSetup.box(Q.lower), start, eps, p=p,
                               max_iter=max_iter, callback=callback)
    # final plan at the returned point, certified more tightly than the run
    final_delta = min(1e-10, 0.01 * eps)
    c = model.cost(y)
    rep = solve_entropic_ot(c, L, W, 1.0, StoppingRule("certificate", final_delta, max_inner),
                            init=cache.get("duals"))
    inner_total += rep.iterations
    f_star = inner_objective(rep.duals, c, L, W) - model.g(y)
    hist.info["final_residual"] = rep.marginal_residual
    return EquilibriumReport(
        y=y,
        f=f_star,
        plan=plan_from_duals(rep.duals, c, 1.0),
        duals=rep.duals,
        outer_iterations=hist.iterations,
        inner_iterations=inner_total,
        converged=hist.converged and rep.converged,
        history=hist,
    )

