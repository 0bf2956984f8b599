"""Barycenters of discrete measures under the entropy-smoothed transport distance.

Two routes to the same point:

* :func:`barycenter_primal` minimises ``sum_k H_{W_k}(L)`` over the simplex
  with the fast universal method in KL geometry. Each oracle call runs one
  balancing solve per measure.
* :func:`barycenter_dual` minimises the smooth unconstrained conjugate
  objective over ``m - 1`` potentials and reads the barycenter off the
  conjugate gradients.

:func:`warm_start_shift` re-uses a dual solution when the window of
measures slides by ``r`` positions.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_ot import (
    DualPotentials,
    StoppingRule,
    as_cost,
    as_probability,
    dual_H_star,
    grad_H_star,
    solve_entropic_ot,
)
from .exceptions import ToleranceNotReached
from .oracle import InexactOracleReply, InnerSolution, make_inexact_oracle
from .universal_gd import ProxSetup, RunHistory, universal_method

__all__ = [
    "BarycenterProblem",
    "DualState",
    "barycenter_objective",
    "barycenter_primal",
    "barycenter_dual",
    "dual_objective",
    "recover_barycenter",
    "warm_start_shift",
]


@dataclass(frozen=True)
class BarycenterProblem:
    measures: tuple
    cost: np.ndarray
    gamma: float = 1.0

    def __post_init__(self) -> None:
        if len(self.measures) < 1:
            raise ValueError("need at least one measure")
        ms = tuple(as_probability(w, f"measure {k}") for k, w in enumerate(self.measures))
        n = ms[0].size
        if any(w.size != n for w in ms):
            raise ValueError("all measures must live on the same support")
        object.__setattr__(self, "measures", ms)
        object.__setattr__(self, "cost", as_cost(self.cost, n))
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.gamma < 0.01:
            warnings.warn(
                f"gamma={self.gamma} is small; conjugate curvature grows like 1/gamma "
                "and balancing slows down",
                RuntimeWarning,
                stacklevel=3,
            )

    @property
    def m(self) -> int:
        return len(self.measures)

    @property
    def n(self) -> int:
        return self.measures[0].size


@dataclass(frozen=True)
class DualState:
    """The ``m - 1`` free potentials; the last one is minus their sum."""

    potentials: tuple

    def __post_init__(self) -> None:
        pots = tuple(np.asarray(p, dtype=float) for p in self.potentials)
        if any(not np.all(np.isfinite(p)) for p in pots):
            raise ValueError("dual potentials must be finite")
        object.__setattr__(self, "potentials", pots)

    @classmethod
    def zeros(cls, m: int, n: int) -> "DualState":
        return cls(tuple(np.zeros(n) for _ in range(m - 1)))

    @classmethod
    def from_vector(cls, x: np.ndarray, n: int) -> "DualState":
        return cls(tuple(np.asarray(x, dtype=float).reshape(-1, n)))

    def as_vector(self) -> np.ndarray:
        if not self.potentials:
            return np.zeros(0)
        return np.concatenate(self.potentials)

    def last(self) -> np.ndarray:
        return -np.sum(self.potentials, axis=0)

    def full(self) -> list[np.ndarray]:
        """All ``m`` potentials, summing to zero."""
        return [*self.potentials, self.last()]


def _map(fn: Callable, items: Sequence, threads: int | None) -> list:
    # results keep input order so reductions are reproducible
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# primal formulation


def _solve_terms(L, problem: BarycenterProblem, stop: StoppingRule, inits, threads):
    def one(k):
        return solve_entropic_ot(problem.cost, L, problem.measures[k], problem.gamma, stop,
                                 init=inits[k] if inits is not None else None)

    return _map(one, range(problem.m), threads)


def barycenter_objective(L, problem: BarycenterProblem, tol: float = 1e-10, *,
                         threads: int | None = None, inits=None):
    """Value and gradient of ``sum_k H_{W_k}(L)``.

    The value is the sum of the balancing dual objectives, a lower bound that
    is tight at convergence. The gradient is the sum of zero-mean row
    potentials.

    Raises
    ------
    ToleranceNotReached
        If any of the ``m`` balancing solves misses ``tol``.
    """
    L = as_probability(L, "L")
    reps = _solve_terms(L, problem, StoppingRule("residual", tol), inits, threads)
    for k, rep in enumerate(reps):
        if not rep.converged:
            raise ToleranceNotReached(
                f"balancing for measure {k} stopped at residual {rep.marginal_residual:.3e}",
                residual=rep.marginal_residual,
                measure=k,
            )
    value = 0.0
    grad = np.zeros(problem.n)
    for rep in reps:
        value += rep.dual_objective
        grad += rep.duals.lam - rep.duals.lam.mean()
    return value, grad


def _primal_oracle(problem: BarycenterProblem, delta: float, threads, max_inner: int):
    cache: list[DualPotentials | None] = [None] * problem.m

    def inner(L, d) -> InnerSolution:
        L = L / L.sum()
        stop = StoppingRule("certificate", d / problem.m, max_inner)
        reps = _solve_terms(L, problem, stop, cache, threads)
        value = 0.0
        grad = np.zeros(problem.n)
        iters = 0
        for k, rep in enumerate(reps):
            cache[k] = rep.duals
            value += rep.dual_objective
            grad += rep.duals.lam - rep.duals.lam.mean()
            iters += rep.iterations
        return InnerSolution(
            value, grad, sense="max",
            certified=all(r.converged for r in reps),
            residuals={"residual": max(r.marginal_residual for r in reps)},
            info={"inner_iterations": iters},
        )

    return make_inexact_oracle(inner, delta, path="subgradient")


def barycenter_primal(problem: BarycenterProblem, eps: float = 1e-6, *, max_iter: int = 20_000,
                      y0=None, threads: int | None = None, max_inner: int = 100_000,
                      callback=None) -> tuple[np.ndarray, RunHistory]:
    """Minimise ``sum_k H_{W_k}(L)`` over the simplex.

    Runs the fast universal method (``p=1``) with the entropic prox. Inner
    balancing accuracy follows the outer ``delta`` schedule and each solve is
    warm-started from the previous call.
    """
    n = problem.n
    start = np.full(n, 1.0 / n) if y0 is None else as_probability(y0, "y0")
    oracle = _primal_oracle(problem, 0.1 * eps, threads, max_inner)
    L, hist = universal_method(oracle, ProxSetup.simplex(n), start, eps, p=1,
                               max_iter=max_iter, callback=callback)
    L = L / L.sum()
    hist.info["objective"] = hist.records[-1].best_F if hist.records else float("nan")
    return L, hist


# ---------------------------------------------------------------------------
# dual formulation


def dual_objective(state: DualState | np.ndarray, problem: BarycenterProblem,
                   threads: int | None = None) -> tuple[float, np.ndarray]:
    """Conjugate objective over the ``m - 1`` free potentials and its gradient."""
    if isinstance(state, DualState):
        state = state.as_vector()
    n, m = problem.n, problem.m
    lams = np.asarray(state, dtype=float).reshape(m - 1, n)
    last = -lams.sum(axis=0)
    args = [*lams, last]

    def term(k):
        W = problem.measures[k]
        return (dual_H_star(args[k], W, problem.cost, problem.gamma),
                grad_H_star(args[k], W, problem.cost, problem.gamma))

    terms = _map(term, range(m), threads)
    value = 0.0
    for t in terms:
        value += t[0]
    g_last = terms[-1][1]
    if m == 1:
        return value, np.zeros(0)
    grad = np.concatenate([terms[k][1] - g_last for k in range(m - 1)])
    return value, grad


def recover_barycenter(state: DualState, problem: BarycenterProblem) -> tuple[np.ndarray, float, list]:
    """Average the ``m`` conjugate gradients; also return their max pairwise spread."""
    pots = state.full() if problem.m > 1 else [np.zeros(problem.n)]
    per_k = [grad_H_star(lam, W, problem.cost, problem.gamma)
             for lam, W in zip(pots, problem.measures)]
    stack = np.array(per_k)
    L = stack.mean(axis=0)
    L = L / L.sum()
    spread = float(max(np.abs(a - b).max() for a in stack for b in stack))
    return L, spread, per_k


def barycenter_dual(problem: BarycenterProblem, eps: float = 1e-8, *, max_iter: int = 50_000,
                    init: DualState | None = None, threads: int | None = None,
                    callback=None) -> tuple[DualState, np.ndarray, RunHistory]:
    """Minimise the conjugate objective with the fast universal method.

    The conjugate minimum is minus the barycenter objective, so
    ``hist.info["objective"]`` holds the negated dual value (comparable with
    :func:`barycenter_primal`) and ``hist.info["dual_objective"]`` the value
    itself. For ``m = 1`` there are no free potentials and the barycenter is the
    conjugate gradient at zero, returned without iterating.
    """
    n, m = problem.n, problem.m
    if m == 1:
        state = DualState(())
        L, spread, per_k = recover_barycenter(state, problem)
        hist = RunHistory(y_out=np.zeros(0), converged=True, certificate=0.0)
        dual_val = dual_objective(np.zeros(0), problem)[0]
        hist.info.update(spread=spread, per_k=per_k, objective=-dual_val, dual_objective=dual_val)
        return state, L, hist
    x0 = DualState.zeros(m, n).as_vector() if init is None else init.as_vector()
    if x0.size != (m - 1) * n:
        raise ValueError("warm-start state does not match the problem size")

    def oracle(x, delta=None) -> InexactOracleReply:
        val, grad = dual_objective(x, problem, threads)
        return InexactOracleReply(val, grad, 0.0, None)

    x, hist = universal_method(oracle, ProxSetup.free((m - 1) * n), x0, eps, p=1,
                               max_iter=max_iter, callback=callback)
    state = DualState.from_vector(x, n)
    L, spread, per_k = recover_barycenter(state, problem)
    dual_val = dual_objective(x, problem)[0]
    hist.info.update(spread=spread, per_k=per_k, objective=-dual_val, dual_objective=dual_val)
    return state, L, hist


def warm_start_shift(prev: DualState, r: int) -> DualState:
    """Start for a window slid by ``r`` measures.

    The full potential list ``(lam_1, ..., lam_m)`` loses its first ``r``
    entries and gains ``r`` copies of ``lam_m``; the first ``m - 1`` entries of
    the result are the new free potentials.
    """
    m = len(prev.potentials) + 1
    if not 0 <= r < m:
        raise ValueError(f"shift r={r} must satisfy 0 <= r < m={m}")
    full = prev.full()
    shifted = full[r:] + [full[-1]] * r
    return DualState(tuple(p.copy() for p in shifted[: m - 1]))
